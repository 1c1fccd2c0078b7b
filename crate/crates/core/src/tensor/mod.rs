//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Values are generic over [`Float`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use gradcheck::finite_difference_check;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// `c[m×n] += a · b` for strided `a` (`m×k`) and `b` (`k×n`); `c` is
    /// dense row-major. Buffers must cover every addressed element.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self]);
}

macro_rules! strided_gemm {
    ($gemm:path, $m:expr, $k:expr, $n:expr, $a:expr, $sa:expr, $b:expr, $sb:expr, $c:expr) => {{
        let (m, k, n) = ($m, $k, $n);
        let reach = |s: [usize; 2], rows: usize, cols: usize| (rows - 1) * s[0] + (cols - 1) * s[1] + 1;
        assert!($a.len() >= reach($sa, m, k) && $b.len() >= reach($sb, k, n) && $c.len() >= m * n);
        // SAFETY: the assertion above bounds every index the kernel reads
        // or writes; the three buffers do not alias.
        unsafe {
            $gemm(
                m, k, n, 1.0,
                $a.as_ptr(), $sa[0] as isize, $sa[1] as isize,
                $b.as_ptr(), $sb[0] as isize, $sb[1] as isize,
                1.0,
                $c.as_mut_ptr(), n as isize, 1,
            )
        }
    }};
}

impl Float for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self]) {
        strided_gemm!(matrixmultiply::sgemm, m, k, n, a, sa, b, sb, c)
    }
}

impl Float for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: [usize; 2], b: &[Self], sb: [usize; 2], c: &mut [Self]) {
        strided_gemm!(matrixmultiply::dgemm, m, k, n, a, sa, b, sb, c)
    }
}

#[inline]
pub(crate) fn cst<T: Float>(x: f64) -> T {
    T::from_f64_lossy(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

pub(crate) fn shape_error(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[cfg(test)]
mod tests;

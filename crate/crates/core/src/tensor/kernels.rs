//! Row-major matrix kernels on top of a blocked single-threaded GEMM, so
//! results are bitwise reproducible on a given machine.

use super::Float;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_nn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    gemm_acc(m, k, n, a, [k, 1], b, [n, 1], c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    gemm_acc(m, k, n, a, [k, 1], b, [1, k], c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn mm_tn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
    gemm_acc(k, m, n, a, [1, k], b, [n, 1], c);
}

/// `c[m×n] += a · b` where `a` is `m×k` and `b` is `k×n`, each given by
/// `[row stride, column stride]`. Callers check buffer lengths.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Float>(m: usize, k: usize, n: usize, a: &[T], sa: [usize; 2], b: &[T], sb: [usize; 2], c: &mut [T]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    T::gemm_acc(m, k, n, a, sa, b, sb, c);
}

/// Transposes the last two axes of a `[batch, rows, cols]` buffer.
pub(crate) fn transpose_last2<T: Float>(batch: usize, rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let o = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) * 0.5 - 2.0).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, expected);

        let bt = transpose_last2(1, k, n, &b);
        let mut c = vec![0.0; m * n];
        mm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_kernel_matches_explicit_transpose() {
        let (m, k, n) = (4, 3, 6);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.25 - 1.0).collect();
        let b: Vec<f64> = (0..m * n).map(|i| (i % 5) as f64 - 2.0).collect();
        let at = transpose_last2(1, m, k, &a);
        let expected = naive(k, m, n, &at, &b);
        let mut c = vec![0.0; k * n];
        mm_tn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, expected);
    }
}

use std::sync::Arc;

use rand::Rng;

use super::kernels::{mm_nn, mm_nt, mm_tn, transpose_last2};
use super::{cst, shape_error, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// Produced without any tracked input; nothing to propagate.
    Detached,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var, usize),
    RmsNorm {
        input: Var,
        axis: usize,
        inv_rms: Vec<T>,
    },
    Relu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<T>,
        count: usize,
    },
    Dropout(Var, Vec<T>),
    Mean(Var),
    Sum(Var),
}

/// Ordered record of executed primitives. Every operation's inputs precede
/// it, so a single reverse sweep visits nodes in a valid topological order.
pub struct Tape<T: Float> {
    values: Vec<Arc<Tensor<T>>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Drops every value recorded at or after position `len`. Handles to
    /// dropped values become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.values.truncate(len);
        self.ops.truncate(len);
        self.tracked.truncate(len);
        self.grads.truncate(len);
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var {
        self.values.push(value.into());
        self.ops.push(Op::Leaf);
        self.tracked.push(requires_grad);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let tracked = inputs.iter().any(|v| self.tracked[v.0]);
        self.values.push(Arc::new(value));
        self.ops.push(if tracked { op() } else { Op::Detached });
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v * c).collect(),
        };
        self.push(out, &[a], || Op::Scale(a, c))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape(&x.shape, &y.shape).ok_or_else(|| shape_error(op, &x.shape, &y.shape))?;
        let mut data = vec![T::zero(); shape.iter().product()];
        for_each_broadcast(&shape, &x.shape, &y.shape, |i, ia, ib| {
            data[i] = f(x.data[ia], y.data[ib]);
        });
        Ok(Tensor { shape, data })
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]`. The right operand
    /// is either rank 2 (shared across the batch) or has the same batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let err = || shape_error("matmul", &x.shape, &y.shape);
        if x.rank() < 2 || y.rank() < 2 {
            return Err(err());
        }
        let (m, k) = (x.shape[x.rank() - 2], x.shape[x.rank() - 1]);
        let (k2, n) = (y.shape[y.rank() - 2], y.shape[y.rank() - 1]);
        if k != k2 {
            return Err(err());
        }
        let mut shape = x.shape[..x.rank() - 1].to_vec();
        shape.push(n);
        let mut data = vec![T::zero(); shape.iter().product()];
        if y.rank() == 2 {
            let rows = x.numel() / k.max(1);
            if k > 0 {
                mm_nn(rows, k, n, &x.data, &y.data, &mut data);
            }
        } else {
            if x.shape[..x.rank() - 2] != y.shape[..y.rank() - 2] {
                return Err(err());
            }
            let batch: usize = x.shape[..x.rank() - 2].iter().product();
            for bi in 0..batch {
                mm_nn(
                    m,
                    k,
                    n,
                    &x.data[bi * m * k..(bi + 1) * m * k],
                    &y.data[bi * k * n..(bi + 1) * k * n],
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        Ok(self.push(Tensor { shape, data }, &[a, b], || Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        if r < 2 {
            return Err(shape_error("transpose", &x.shape, &[]));
        }
        let (rows, cols) = (x.shape[r - 2], x.shape[r - 1]);
        let batch = x.numel() / (rows * cols).max(1);
        let data = transpose_last2(batch, rows, cols, &x.data);
        let mut shape = x.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor { shape, data }, &[a], || Op::Transpose(a)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let r = x.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_error("permute", &x.shape, perm));
        }
        let in_strides = strides(&x.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(x.numel());
        for_each_strided(&shape, &walk, |_, off| data.push(x.data[off]));
        let perm = perm.to_vec();
        Ok(self.push(Tensor { shape, data }, &[a], || Op::Permute(a, perm)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(shape_error("reshape", &x.shape, shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        Ok(self.push(out, &[a], || Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.value(*first).shape.clone();
        if axis >= base.len() {
            return Err(shape_error("concat", &base, &[axis]));
        }
        let mut shape = base.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_error("concat", &base, s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.numel() / outer.max(1);
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(Tensor { shape, data }, &inputs, || Op::Concat(parts, axis)))
    }

    /// Rows of a `[rows, width]` table selected by `ids`; the result has
    /// shape `id_shape + [width]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_error("embedding_gather", &t.shape, id_shape));
        }
        let (rows, width) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(shape_error("embedding_gather", &t.shape, &[id]));
            }
            data.extend_from_slice(&t.data[id * width..(id + 1) * width]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(width);
        let ids = ids.to_vec();
        Ok(self.push(Tensor { shape, data }, &[table], || Op::Gather(table, ids)))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_error("softmax", &x.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&x.shape, axis);
        let mut data = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x.data[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x.data[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data }, &[a], || Op::Softmax(a, axis)))
    }

    /// `x / sqrt(mean(x²) + eps)` along `axis`, without a learned scale.
    pub fn rms_normalize(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_error("rms_normalize", &x.shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&x.shape, axis);
        let n = T::from_usize(len).unwrap_or_else(T::one);
        let mut inv_rms = vec![T::zero(); outer * inner];
        let mut data = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut ss = T::zero();
                for j in 0..len {
                    let v = x.data[base + j * inner];
                    ss += v * v;
                }
                let inv = T::one() / (ss / n + eps).sqrt();
                inv_rms[o * inner + i] = inv;
                for j in 0..len {
                    data[base + j * inner] = x.data[base + j * inner] * inv;
                }
            }
        }
        let shape = x.shape.clone();
        Ok(self.push(Tensor { shape, data }, &[a], || Op::RmsNorm {
            input: a,
            axis,
            inv_rms,
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        };
        self.push(out, &[a], || Op::Relu(a))
    }

    /// Mean token-level cross entropy of `logits[..., vocab]` against
    /// `targets`, skipping positions whose target equals `ignore_id`.
    /// Returns 0 when every position is ignored.
    pub fn cross_entropy_with_ignore(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let x = self.value(logits);
        let vocab = *x.shape.last().ok_or_else(|| shape_error("cross_entropy", &x.shape, &[]))?;
        let rows = if vocab == 0 { 0 } else { x.numel() / vocab };
        if rows != targets.len() {
            return Err(shape_error("cross_entropy", &x.shape, &[targets.len()]));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= vocab {
                return Err(shape_error("cross_entropy", &x.shape, &[t]));
            }
            let row = &x.data[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / sum;
            }
            total += sum.ln() + max - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap_or_else(T::one)
        };
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], || Op::CrossEntropy {
            logits,
            targets,
            ignore_id,
            probs,
            count,
        }))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let x = self.value(a);
        let keep: T = cst(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        };
        Ok(self.push(out, &[a], || Op::Dropout(a, mask)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_usize(x.numel().max(1)).unwrap_or_else(T::one);
        let s: T = x.data.iter().copied().sum();
        self.push(Tensor::scalar(s / n), &[a], || Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], || Op::Sum(a))
    }

    /// Propagates `d loss / d v` to every tracked node. Gradients of leaves
    /// are retained and available through [`Tape::grad`]; intermediate
    /// gradients are released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.tracked[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.ops[idx], Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let vals = &self.values;
        let out_shape = &vals[idx].shape;
        match &self.ops[idx] {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.tracked[v.0] {
                        let s = &vals[v.0].shape;
                        let gv = slot(grads, v, vals[v.0].numel());
                        if s == out_shape {
                            for (x, &y) in gv.iter_mut().zip(g) {
                                *x += y;
                            }
                        } else {
                            for_each_broadcast(out_shape, s, s, |i, ia, _| gv[ia] += g[i]);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&vals[a.0], &vals[b.0]);
                if self.tracked[a.0] {
                    let ga = slot(grads, *a, xa.numel());
                    for_each_broadcast(out_shape, &xa.shape, &xb.shape, |i, ia, ib| {
                        ga[ia] += g[i] * xb.data[ib]
                    });
                }
                if self.tracked[b.0] {
                    let gb = slot(grads, *b, xb.numel());
                    for_each_broadcast(out_shape, &xa.shape, &xb.shape, |i, ia, ib| {
                        gb[ib] += g[i] * xa.data[ia]
                    });
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *c;
                }
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (&vals[a.0], &vals[b.0]);
                let (m, k) = (xa.shape[xa.rank() - 2], xa.shape[xa.rank() - 1]);
                let n = xb.shape[xb.rank() - 1];
                if xb.rank() == 2 {
                    let rows = xa.numel() / k.max(1);
                    if self.tracked[a.0] {
                        mm_nt(rows, n, k, g, &xb.data, slot(grads, *a, xa.numel()));
                    }
                    if self.tracked[b.0] {
                        mm_tn(rows, k, n, &xa.data, g, slot(grads, *b, xb.numel()));
                    }
                } else {
                    let batch = xa.numel() / (m * k).max(1);
                    if self.tracked[a.0] {
                        let ga = slot(grads, *a, xa.numel());
                        for bi in 0..batch {
                            mm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &xb.data[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if self.tracked[b.0] {
                        let gb = slot(grads, *b, xb.numel());
                        for bi in 0..batch {
                            mm_tn(
                                m,
                                k,
                                n,
                                &xa.data[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let r = out_shape.len();
                let (rows, cols) = (out_shape[r - 2], out_shape[r - 1]);
                let batch = g.len() / (rows * cols).max(1);
                let back = transpose_last2(batch, rows, cols, g);
                add_into(slot(grads, *a, g.len()), &back);
            }
            Op::Permute(a, perm) => {
                let in_strides = strides(&vals[a.0].shape);
                let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let ga = slot(grads, *a, g.len());
                for_each_strided(out_shape, &walk, |i, off| ga[off] += g[i]);
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Relu(a) => {
                let x = &vals[a.0].data;
                let ga = slot(grads, *a, g.len());
                for ((gi, &xi), &gy) in ga.iter_mut().zip(x).zip(g) {
                    if xi > T::zero() {
                        *gi += gy;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let numel = vals[p.0].numel();
                        let chunk = numel / outer.max(1);
                        if self.tracked[p.0] {
                            let gp = slot(grads, *p, numel);
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[offset..offset + chunk]);
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Gather(table, ids) => {
                let t = &vals[table.0];
                let width = t.shape[1];
                let gt = slot(grads, *table, t.numel());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
            Op::Softmax(a, axis) => {
                let y = &vals[idx].data;
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let ga = slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { input, axis, inv_rms } => {
                let x = &vals[input.0].data;
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let n = T::from_usize(len).unwrap_or_else(T::one);
                let ga = slot(grads, *input, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let inv = inv_rms[o * inner + i];
                        let mut gx = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx += g[p] * x[p];
                        }
                        let coef = inv * inv * inv * gx / n;
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] += inv * g[p] - x[p] * coef;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = *vals[logits.0].shape.last().unwrap_or(&1);
                let scale = g[0] / T::from_usize(*count).unwrap_or_else(T::one);
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for (x, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                        *x += scale * p;
                    }
                    row[t] -= scale;
                }
            }
            Op::Dropout(a, mask) => {
                let ga = slot(grads, *a, g.len());
                for ((x, &m), &y) in ga.iter_mut().zip(mask).zip(g) {
                    *x += y * m;
                }
            }
            Op::Mean(a) => {
                let numel = vals[a.0].numel();
                let share = g[0] / T::from_usize(numel.max(1)).unwrap_or_else(T::one);
                for x in slot(grads, *a, numel).iter_mut() {
                    *x += share;
                }
            }
            Op::Sum(a) => {
                let numel = vals[a.0].numel();
                for x in slot(grads, *a, numel).iter_mut() {
                    *x += g[0];
                }
            }
        }
    }
}

fn slot<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// NumPy-style broadcast of two shapes aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| if i + s.len() >= r { s[i + s.len() - r] } else { 1 };
    (0..r)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (x, 1) => Some(x),
            (1, y) => Some(y),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    let is_suffix = |s: &[usize]| s.len() <= out.len() && s == &out[out.len() - s.len()..];
    if a == out && is_suffix(b) {
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if b == out && is_suffix(a) {
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Calls `f(out_index, offset)` walking `out` with arbitrary strides.
fn for_each_strided(out: &[usize], walk: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let r = out.len();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += walk[d];
            if idx[d] < out[d] {
                break;
            }
            off -= walk[d] * out[d];
            idx[d] = 0;
        }
    }
}

//! Differentiable primitives: matmul, elementwise maps, reductions, softmax,
//! and shape surgery (reshape/permute/concat/slice/pad).
//!
//! Binary elementwise ops require identical shapes; the only implicit
//! broadcast anywhere is the scalar in [`scale`]. Kernels parallelize over
//! disjoint output regions only, so results are bit-identical regardless of
//! thread count.

use std::sync::Arc;

use rayon::prelude::*;

use super::autograd::Backward;
use super::{numel_of, Result, Scalar, Tensor, TensorError};

// ── raw matmul kernels ──────────────────────────────────────────────────

const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// out[m,n] = a[m,k] · b[k,n]
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [T], a_row: &[T]| {
        for v in out_row.iter_mut() {
            *v = T::ZERO;
        }
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = av.mul_add(bv, *o);
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(o, ar)| row(o, ar));
    } else {
        for (o, ar) in out.chunks_mut(n).zip(a.chunks(k)) {
            row(o, ar);
        }
    }
}

/// out[m,k] = a[m,n] · b[k,n]ᵀ  (b transposed)
pub(crate) fn mm_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let row = |out_row: &mut [T], a_row: &[T]| {
        for (kk, o) in out_row.iter_mut().enumerate() {
            *o = crate::layers::kernels::dot_lanes(a_row, &b[kk * n..(kk + 1) * n]);
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(|(o, ar)| row(o, ar));
    } else {
        for (o, ar) in out.chunks_mut(k).zip(a.chunks(n)) {
            row(o, ar);
        }
    }
}

/// out[k,n] = a[m,k]ᵀ · b[m,n]  (a transposed)
pub(crate) fn mm_at<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    // Each task owns a block of output rows (= a-columns), scanning all of
    // a and b once; deterministic since each row is written by one task.
    let block = |out_block: &mut [T], kk0: usize| {
        for v in out_block.iter_mut() {
            *v = T::ZERO;
        }
        let rows = out_block.len() / n;
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            for r in 0..rows {
                let av = a[i * k + kk0 + r];
                let o_row = &mut out_block[r * n..(r + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o = av.mul_add(bv, *o);
                }
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD && k > 1 {
        let nblocks = rayon::current_num_threads().min(k);
        let rows_per = k.div_ceil(nblocks);
        out.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(bi, chunk)| block(chunk, bi * rows_per));
    } else {
        block(out, 0);
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

fn matmul_dims(
    lhs: &[usize],
    rhs: &[usize],
) -> Result<(usize, usize, usize, usize, Vec<usize>)> {
    if lhs.len() < 2 || rhs.len() < 2 || lhs.len() != rhs.len() {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let (m, k) = (lhs[lhs.len() - 2], lhs[lhs.len() - 1]);
    let (k2, n) = (rhs[rhs.len() - 2], rhs[rhs.len() - 1]);
    let lead = &lhs[..lhs.len() - 2];
    if k != k2 || lead != &rhs[..rhs.len() - 2] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    let batch = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok((batch, m, k, n, out_shape))
}

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for MatmulBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (b, m, k, n) = (self.batch, self.m, self.k, self.n);
        let a = inputs[0].data();
        let bm = inputs[1].data();
        let ga = needs[0].then(|| {
            let mut out = vec![T::ZERO; b * m * k];
            for i in 0..b {
                mm_bt(
                    &grad[i * m * n..(i + 1) * m * n],
                    &bm[i * k * n..(i + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut out[i * m * k..(i + 1) * m * k],
                );
            }
            out
        });
        let gb = needs[1].then(|| {
            let mut out = vec![T::ZERO; b * k * n];
            for i in 0..b {
                mm_at(
                    &a[i * m * k..(i + 1) * m * k],
                    &grad[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    &mut out[i * k * n..(i + 1) * k * n],
                );
            }
            out
        });
        vec![ga, gb]
    }
}

/// Matrix product; batched over identical leading dimensions.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, n, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let mut data = vec![T::ZERO; batch * m * n];
    for i in 0..batch {
        mm(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            &mut data[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::from_op(
        data,
        &out_shape,
        vec![a.clone(), b.clone()],
        Box::new(MatmulBackward { batch, m, k, n }),
    ))
}

// ── elementwise ─────────────────────────────────────────────────────────

fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    if a.len() >= PAR_FLOP_THRESHOLD {
        a.par_iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    }
}

fn map1<T: Scalar>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if a.len() >= PAR_FLOP_THRESHOLD {
        a.par_iter().map(|&x| f(x)).collect()
    } else {
        a.iter().map(|&x| f(x)).collect()
    }
}

struct AddBackward;
impl<T: Scalar> Backward<T> for AddBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.to_vec()),
        ]
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = map2(a.data(), b.data(), |x, y| x + y);
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(AddBackward),
    ))
}

struct SubBackward;
impl<T: Scalar> Backward<T> for SubBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| grad.to_vec()),
            needs[1].then(|| grad.iter().map(|&g| -g).collect()),
        ]
    }
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data = map2(a.data(), b.data(), |x, y| x - y);
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(SubBackward),
    ))
}

struct MulBackward;
impl<T: Scalar> Backward<T> for MulBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| map2(grad, inputs[1].data(), |g, y| g * y)),
            needs[1].then(|| map2(grad, inputs[0].data(), |g, x| g * x)),
        ]
    }
}

/// Hadamard product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = map2(a.data(), b.data(), |x, y| x * y);
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone(), b.clone()],
        Box::new(MulBackward),
    ))
}

struct ScaleBackward<T>(T);
impl<T: Scalar> Backward<T> for ScaleBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = self.0;
        vec![needs[0].then(|| map1(grad, |g| g * s))]
    }
}

/// Multiply by a scalar (the one permitted broadcast).
pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = map1(a.data(), |x| x * s);
    Tensor::from_op(data, a.shape(), vec![a.clone()], Box::new(ScaleBackward(s)))
}

struct ReluBackward;
impl<T: Scalar> Backward<T> for ReluBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        // Subgradient at 0 is 0.
        vec![needs[0].then(|| {
            map2(grad, inputs[0].data(), |g, x| {
                if x > T::ZERO {
                    g
                } else {
                    T::ZERO
                }
            })
        })]
    }
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = map1(a.data(), |x| x.maximum(T::ZERO));
    Tensor::from_op(data, a.shape(), vec![a.clone()], Box::new(ReluBackward))
}

struct ExpBackward<T>(Arc<Vec<T>>);
impl<T: Scalar> Backward<T> for ExpBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| map2(grad, &self.0, |g, y| g * y))]
    }
}

pub fn exp<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = map1(a.data(), |x| x.exp());
    let saved = Arc::new(data.clone());
    Tensor::from_op(data, a.shape(), vec![a.clone()], Box::new(ExpBackward(saved)))
}

struct LogBackward;
impl<T: Scalar> Backward<T> for LogBackward {
    fn backward(&self, grad: &[T], inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| map2(grad, inputs[0].data(), |g, x| g / x))]
    }
}

/// Natural logarithm; rejects non-positive inputs.
pub fn log<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(&bad) = a.data().iter().find(|&&x| x <= T::ZERO) {
        return Err(TensorError::Domain {
            op: "log",
            what: format!("input contains non-positive value {bad}"),
        });
    }
    let data = map1(a.data(), |x| x.ln());
    Ok(Tensor::from_op(
        data,
        a.shape(),
        vec![a.clone()],
        Box::new(LogBackward),
    ))
}

struct AddBiasBackward {
    rows: usize,
    dim: usize,
}
impl<T: Scalar> Backward<T> for AddBiasBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let gx = needs[0].then(|| grad.to_vec());
        let gb = needs[1].then(|| {
            let mut acc = vec![T::ZERO; self.dim];
            for r in 0..self.rows {
                for (a, &g) in acc.iter_mut().zip(&grad[r * self.dim..(r + 1) * self.dim]) {
                    *a += g;
                }
            }
            acc
        });
        vec![gx, gb]
    }
}

/// Add a vector along the last dimension of `x` (explicit broadcast).
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let dim = *x.shape().last().ok_or_else(|| TensorError::Contract(
        "add_bias on zero-rank tensor".into(),
    ))?;
    if b.shape() != [dim] {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let rows = x.numel() / dim;
    let bd = b.data();
    let mut data = x.data().to_vec();
    for r in 0..rows {
        for (v, &bv) in data[r * dim..(r + 1) * dim].iter_mut().zip(bd) {
            *v += bv;
        }
    }
    Ok(Tensor::from_op(
        data,
        x.shape(),
        vec![x.clone(), b.clone()],
        Box::new(AddBiasBackward { rows, dim }),
    ))
}

// ── reductions ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

fn reduce_shape(shape: &[usize], axes: &[usize], keepdims: bool) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "reduce",
                axis: a,
                shape: shape.to_vec(),
            });
        }
        if seen[a] {
            return Err(TensorError::Contract(format!("duplicate reduce axis {a}")));
        }
        seen[a] = true;
    }
    let mut out = Vec::new();
    for (i, &s) in shape.iter().enumerate() {
        if seen[i] {
            if keepdims {
                out.push(1);
            }
        } else {
            out.push(s);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    Ok(out)
}

struct ReduceBackward<T> {
    kind: ReduceKind,
    out_index: Arc<Vec<u32>>,
    count: T,
}

impl<T: Scalar> Backward<T> for ReduceBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let inv = match self.kind {
                ReduceKind::Sum => T::ONE,
                ReduceKind::Mean => T::ONE / self.count,
            };
            self.out_index
                .iter()
                .map(|&oi| grad[oi as usize] * inv)
                .collect::<Vec<T>>()
        })]
    }
}

/// Sum or mean over a set of distinct axes. An empty axis list reduces over
/// all axes (scalar output).
pub fn reduce<T: Scalar>(
    kind: ReduceKind,
    x: &Tensor<T>,
    axes: &[usize],
    keepdims: bool,
) -> Result<Tensor<T>> {
    let all_axes: Vec<usize> = (0..x.shape().len()).collect();
    let axes: &[usize] = if axes.is_empty() { &all_axes } else { axes };
    let out_shape = reduce_shape(x.shape(), axes, keepdims)?;
    let reduced: std::collections::HashSet<usize> = axes.iter().copied().collect();

    // Precompute, for every input element, its flat output index.
    let in_shape = x.shape().to_vec();
    let rank = in_shape.len();
    let mut out_strides_by_axis = vec![0usize; rank];
    {
        let mut stride = 1usize;
        for i in (0..rank).rev() {
            if !reduced.contains(&i) {
                out_strides_by_axis[i] = stride;
                stride *= in_shape[i];
            }
        }
    }
    let n = x.numel();
    assert!(n < u32::MAX as usize, "reduce index table limited to u32");
    let mut out_index = vec![0u32; n];
    let mut coord = vec![0usize; rank];
    for (flat, slot) in out_index.iter_mut().enumerate().take(n) {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coord[i] = rem % in_shape[i];
            rem /= in_shape[i];
        }
        let mut oi = 0usize;
        for i in 0..rank {
            oi += coord[i] * out_strides_by_axis[i];
        }
        *slot = oi as u32;
    }

    let out_n = numel_of(&out_shape);
    let count = T::from_f64((n / out_n) as f64);
    let mut data = vec![T::ZERO; out_n];
    for (i, &v) in x.data().iter().enumerate() {
        data[out_index[i] as usize] += v;
    }
    if kind == ReduceKind::Mean {
        for v in data.iter_mut() {
            *v = *v / count;
        }
    }
    Ok(Tensor::from_op(
        data,
        &out_shape,
        vec![x.clone()],
        Box::new(ReduceBackward {
            kind,
            out_index: Arc::new(out_index),
            count,
        }),
    ))
}

/// Scalar sum of every element.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    reduce(ReduceKind::Sum, x, &[], false)
}

// ── softmax ─────────────────────────────────────────────────────────────

struct SoftmaxBackward<T> {
    saved: Arc<Vec<T>>,
    outer: usize,
    extent: usize,
    inner: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward<T> {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let y = &self.saved;
            let mut gx = vec![T::ZERO; grad.len()];
            for o in 0..self.outer {
                for i in 0..self.inner {
                    let base = o * self.extent * self.inner + i;
                    let mut dot = T::ZERO;
                    for e in 0..self.extent {
                        let idx = base + e * self.inner;
                        dot = grad[idx].mul_add(y[idx], dot);
                    }
                    for e in 0..self.extent {
                        let idx = base + e * self.inner;
                        gx[idx] = y[idx] * (grad[idx] - dot);
                    }
                }
            }
            gx
        })]
    }
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "softmax",
            axis,
            shape: shape.to_vec(),
        });
    }
    let extent = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut data = vec![T::ZERO; x.numel()];

    let slice_job = |data: &mut [T], o: usize| {
        for i in 0..inner {
            let base_in_chunk = i;
            let src_base = o * extent * inner + i;
            let mut mx = xd[src_base];
            for e in 1..extent {
                let v = xd[src_base + e * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::ZERO;
            for e in 0..extent {
                let v = (xd[src_base + e * inner] - mx).exp();
                data[base_in_chunk + e * inner] = v;
                denom += v;
            }
            for e in 0..extent {
                let idx = base_in_chunk + e * inner;
                data[idx] = data[idx] / denom;
            }
        }
    };
    if x.numel() >= PAR_FLOP_THRESHOLD && outer > 1 {
        data.par_chunks_mut(extent * inner)
            .enumerate()
            .for_each(|(o, chunk)| slice_job(chunk, o));
    } else {
        for (o, chunk) in data.chunks_mut(extent * inner).enumerate() {
            slice_job(chunk, o);
        }
    }

    let saved = Arc::new(data.clone());
    Ok(Tensor::from_op(
        data,
        shape,
        vec![x.clone()],
        Box::new(SoftmaxBackward {
            saved,
            outer,
            extent,
            inner,
        }),
    ))
}

// ── shape surgery ───────────────────────────────────────────────────────

struct ReshapeBackward;
impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| grad.to_vec())]
    }
}

/// View with a new shape; element count must be preserved. Zero-copy forward.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let to_n = numel_of(shape);
    if to_n != x.numel() {
        return Err(TensorError::ElementCount {
            from: x.shape().to_vec(),
            from_n: x.numel(),
            to: shape.to_vec(),
            to_n,
        });
    }
    Ok(Tensor::from_op(
        x.data().to_vec(),
        shape,
        vec![x.clone()],
        Box::new(ReshapeBackward),
    ))
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    // stride in the source for each output axis
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = vec![T::ZERO; n];
    let out_strides = strides_of(&out_shape);
    let fill = |chunk: &mut [T], start: usize| {
        // decode the starting output coordinate once, then walk
        let mut coord = vec![0usize; rank];
        let mut rem = start;
        for i in 0..rank {
            coord[i] = rem / out_strides[i];
            rem %= out_strides[i];
        }
        let mut src_idx: usize = coord.iter().zip(&src_stride).map(|(c, s)| c * s).sum();
        for v in chunk.iter_mut() {
            *v = src[src_idx];
            // increment output coordinate (odometer), adjusting src_idx
            for i in (0..rank).rev() {
                coord[i] += 1;
                src_idx += src_stride[i];
                if coord[i] < out_shape[i] {
                    break;
                }
                src_idx -= src_stride[i] * out_shape[i];
                coord[i] = 0;
            }
        }
    };
    if n >= PAR_FLOP_THRESHOLD {
        let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(ci, c)| fill(c, ci * chunk));
    } else {
        fill(&mut out, 0);
    }
    (out, out_shape)
}

struct PermuteBackward {
    perm: Vec<usize>,
    out_shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for PermuteBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let mut inverse = vec![0usize; self.perm.len()];
            for (i, &p) in self.perm.iter().enumerate() {
                inverse[p] = i;
            }
            permute_copy(grad, &self.out_shape, &inverse).0
        })]
    }
}

/// Reorder axes; `perm` must be a permutation of `0..rank`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::Contract(format!(
            "permute: {perm:?} is not a permutation of 0..{rank}"
        )));
    }
    let (data, out_shape) = permute_copy(x.data(), x.shape(), perm);
    Ok(Tensor::from_op(
        data,
        &out_shape,
        vec![x.clone()],
        Box::new(PermuteBackward {
            perm: perm.to_vec(),
            out_shape: out_shape.clone(),
        }),
    ))
}

struct ConcatBackward {
    axis: usize,
    in_shapes: Vec<Vec<usize>>,
}
impl<T: Scalar> Backward<T> for ConcatBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let outer: usize = self.in_shapes[0][..self.axis].iter().product();
        let inner: usize = self.in_shapes[0][self.axis + 1..].iter().product();
        let total_axis: usize = self.in_shapes.iter().map(|s| s[self.axis]).sum();
        let mut offset = 0usize;
        let mut grads = Vec::with_capacity(self.in_shapes.len());
        for (idx, shape) in self.in_shapes.iter().enumerate() {
            let ext = shape[self.axis];
            if needs[idx] {
                let mut g = vec![T::ZERO; outer * ext * inner];
                for o in 0..outer {
                    let src = (o * total_axis + offset) * inner;
                    let dst = o * ext * inner;
                    g[dst..dst + ext * inner]
                        .copy_from_slice(&grad[src..src + ext * inner]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += ext;
        }
        grads
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or_else(|| {
        TensorError::Contract("concat of zero tensors".into())
    })?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            shape: first.shape().to_vec(),
        });
    }
    for t in tensors {
        if t.shape().len() != rank
            || t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_axis;
    let mut data = vec![T::ZERO; outer * total_axis * inner];
    let mut offset = 0usize;
    for t in tensors {
        let ext = t.shape()[axis];
        let src = t.data();
        for o in 0..outer {
            let dst = (o * total_axis + offset) * inner;
            data[dst..dst + ext * inner]
                .copy_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
        }
        offset += ext;
    }
    Ok(Tensor::from_op(
        data,
        &out_shape,
        tensors.iter().map(|&t| t.clone()).collect(),
        Box::new(ConcatBackward {
            axis,
            in_shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        }),
    ))
}

struct SliceBackward {
    axis: usize,
    start: usize,
    in_shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for SliceBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let outer: usize = self.in_shape[..self.axis].iter().product();
            let inner: usize = self.in_shape[self.axis + 1..].iter().product();
            let full = self.in_shape[self.axis];
            let len = grad.len() / (outer * inner).max(1);
            let mut gx = vec![T::ZERO; outer * full * inner];
            for o in 0..outer {
                let dst = (o * full + self.start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
            }
            gx
        })]
    }
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn slice<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "slice",
            axis,
            shape: shape.to_vec(),
        });
    }
    if start + len > shape[axis] {
        return Err(TensorError::Contract(format!(
            "slice [{start}, {}) exceeds extent {} on axis {axis}",
            start + len,
            shape[axis]
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = vec![T::ZERO; outer * len * inner];
    let src = x.data();
    for o in 0..outer {
        let s = (o * full + start) * inner;
        let d = o * len * inner;
        data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
    }
    Ok(Tensor::from_op(
        data,
        &out_shape,
        vec![x.clone()],
        Box::new(SliceBackward {
            axis,
            start,
            in_shape: shape.to_vec(),
        }),
    ))
}

struct PadBackward {
    pads: Vec<(usize, usize)>,
    in_shape: Vec<usize>,
}
impl<T: Scalar> Backward<T> for PadBackward {
    fn backward(&self, grad: &[T], _inputs: &[Tensor<T>], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| {
            let out_shape: Vec<usize> = self
                .in_shape
                .iter()
                .zip(&self.pads)
                .map(|(&s, &(lo, hi))| s + lo + hi)
                .collect();
            let out_strides = strides_of(&out_shape);
            let rank = self.in_shape.len();
            let n: usize = self.in_shape.iter().product();
            let mut gx = vec![T::ZERO; n];
            let in_strides = strides_of(&self.in_shape);
            for (flat, g) in gx.iter_mut().enumerate() {
                let mut oi = 0usize;
                let mut rem = flat;
                for i in 0..rank {
                    let c = rem / in_strides[i];
                    rem %= in_strides[i];
                    oi += (c + self.pads[i].0) * out_strides[i];
                }
                *g = grad[oi];
            }
            gx
        })]
    }
}

/// Zero-pad with `(lo, hi)` amounts per axis.
pub fn zero_pad<T: Scalar>(x: &Tensor<T>, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
    let shape = x.shape();
    if pads.len() != shape.len() {
        return Err(TensorError::Contract(format!(
            "zero_pad expects {} pad pairs, got {}",
            shape.len(),
            pads.len()
        )));
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(pads)
        .map(|(&s, &(lo, hi))| s + lo + hi)
        .collect();
    let out_strides = strides_of(&out_shape);
    let in_strides = strides_of(shape);
    let rank = shape.len();
    let mut data = vec![T::ZERO; numel_of(&out_shape)];
    let src = x.data();
    for (flat, &v) in src.iter().enumerate() {
        let mut oi = 0usize;
        let mut rem = flat;
        for i in 0..rank {
            let c = rem / in_strides[i];
            rem %= in_strides[i];
            oi += (c + pads[i].0) * out_strides[i];
        }
        data[oi] = v;
    }
    Ok(Tensor::from_op(
        data,
        &out_shape,
        vec![x.clone()],
        Box::new(PadBackward {
            pads: pads.to_vec(),
            in_shape: shape.to_vec(),
        }),
    ))
}

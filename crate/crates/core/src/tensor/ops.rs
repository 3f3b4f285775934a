use rayon::prelude::*;

use super::{record_dispatch, round_bf16_slice, strides_of, Precision, Tensor};
use crate::error::{Error, Result};

/// Work threshold (multiply-adds) below which GEMM stays on the calling thread.
const PAR_GEMM_WORK: usize = 1 << 15;

fn finish(mut t: Tensor, precision: Precision) -> Tensor {
    if precision == Precision::Bf16E {
        round_bf16_slice(&mut t.data);
    }
    t.precision = precision;
    t
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]`, k ascending, f32 accumulation.
pub(crate) fn gemm_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, orow): (usize, &mut [f32])| {
        orow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_GEMM_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[i, j] = sum_r a[r, i] * b[r, j]` for `a: [rows, m]`, `b: [rows, n]`, r ascending.
pub(crate) fn gemm_tn_into(a: &[f32], b: &[f32], rows: usize, m: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), rows * m);
    debug_assert_eq!(b.len(), rows * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, orow): (usize, &mut [f32])| {
        orow.fill(0.0);
        for r in 0..rows {
            let av = a[r * m + i];
            let brow = &b[r * n..(r + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    if rows * m * n >= PAR_GEMM_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]` for `a: [m, k]`, `b: [n, k]`, k ascending.
pub(crate) fn gemm_nt_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, orow): (usize, &mut [f32])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_GEMM_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Matrix product with f32 accumulation; the result is rounded to `out`.
pub fn gemm(a: &Tensor, b: &Tensor, out: Precision) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "gemm",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut data = vec![0.0; m * n];
    gemm_into(&a.data, &b.data, m, k, n, &mut data);
    record_dispatch();
    Ok(finish(Tensor::new(&[m, n], data)?, out))
}

/// `B` independent products `a[i] @ b[i]` issued as a single dispatch.
pub fn batched_gemm(a: &Tensor, b: &Tensor, out: Precision) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(Error::Dimension {
            op: "batched_gemm",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
    let mut data = vec![0.0; bs * m * n];
    if m * n > 0 {
        data.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(i, o)| {
                gemm_into(
                    &a.data[i * m * k..(i + 1) * m * k],
                    &b.data[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    o,
                )
            });
    }
    record_dispatch();
    Ok(finish(Tensor::new(&[bs, m, n], data)?, out))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let l = *x
        .shape
        .last()
        .ok_or_else(|| Error::shape("softmax_lastdim", "rank-0 tensor"))?;
    if l == 0 {
        return Err(Error::shape("softmax_lastdim", "last axis is empty"));
    }
    if let Some(index) = x.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "softmax_lastdim",
            index,
        });
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(l) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    record_dispatch();
    Ok(finish(Tensor::new(&x.shape, out)?, x.precision))
}

/// Reorders axes so that output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm.iter().any(|&p| {
            if p >= rank || seen[p] {
                true
            } else {
                seen[p] = true;
                false
            }
        })
    {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let in_strides = strides_of(&x.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(x.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    record_dispatch();
    let mut t = Tensor::new(&out_shape, out)?;
    t.precision = x.precision;
    Ok(t)
}

pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape("transpose2d", format!("rank {}", x.rank())));
    }
    permute(x, &[1, 0])
}

/// Sums over `axis`, removing it; accumulation in f32, ascending index.
pub fn reduce_sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "reduce_sum",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    record_dispatch();
    Ok(finish(Tensor::new(&shape, out)?, x.precision))
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Dimension {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    record_dispatch();
    Ok(finish(Tensor::new(&a.shape, data)?, a.precision))
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = x.data.iter().map(|&v| f(v)).collect();
    record_dispatch();
    finish(
        Tensor {
            shape: x.shape.clone(),
            data,
            precision: x.precision,
        },
        x.precision,
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, s: f32) -> Tensor {
    unary(x, |v| v * s)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, sigmoid_scalar)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    unary(x, gelu_scalar)
}

/// Elementwise derivative of [`gelu`].
pub fn gelu_grad(x: &Tensor) -> Tensor {
    unary(x, gelu_grad_scalar)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape[axis] {
        return Err(Error::shape(
            "narrow",
            format!(
                "range {start}..{} on axis {axis} of {:?}",
                start + len,
                x.shape
            ),
        ));
    }
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let full = x.shape[axis];
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut t = Tensor::new(&shape, data)?;
    t.precision = x.precision;
    Ok(t)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} out of range")));
    }
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p
                .shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Dimension {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut t = Tensor::new(&shape, data)?;
    t.precision = first.precision;
    Ok(t)
}

//! Row-blocked LayerNorm.
//!
//! The forward kernel computes both statistics in a single traversal of each
//! row (compensated f32 sums of `x` and `x^2`). The backward kernel reduces the
//! weight and bias gradients in two deterministic stages: per-block partials
//! into a `[num_blocks, C]` buffer, then a column reduction over blocks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{record_dispatch, Precision, Tensor};

#[derive(Clone, Debug)]
pub struct LnSaved {
    pub mean: Tensor,
    /// `1 / sqrt(var + eps)` per row.
    pub rstd: Tensor,
    pub eps: f32,
}

/// Kahan-compensated f32 accumulator.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f32,
    comp: f32,
}

impl Kahan {
    #[inline]
    fn add(&mut self, v: f32) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }
}

fn split_rows(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape(op, "rank-0 input"))?;
    if c == 0 {
        return Err(Error::shape(op, "empty channel axis"));
    }
    Ok((x.numel() / c, c))
}

/// Normalises each row over the last axis: `(x - mean) * rstd * gamma + beta`.
pub fn layernorm_fwd(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    rows_per_block: usize,
) -> Result<(Tensor, LnSaved)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Parameter {
            name: "eps",
            msg: format!("must be positive, got {eps}"),
        });
    }
    if rows_per_block == 0 {
        return Err(Error::Parameter {
            name: "rows_per_block",
            msg: "must be at least 1".into(),
        });
    }
    let (rows, c) = split_rows(x, "layernorm_fwd")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension {
            op: "layernorm_fwd",
            lhs: x.shape().to_vec(),
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    let mut y = vec![0.0f32; rows * c];
    let mut mean = vec![0.0f32; rows];
    let mut rstd = vec![0.0f32; rows];
    let inv_c = 1.0 / c as f32;
    let xd = x.data();

    y.par_chunks_mut(rows_per_block * c)
        .zip(mean.par_chunks_mut(rows_per_block))
        .zip(rstd.par_chunks_mut(rows_per_block))
        .enumerate()
        .for_each(|(blk, ((yb, mb), rb))| {
            let row0 = blk * rows_per_block;
            for (i, (yrow, (m, r))) in yb
                .chunks_mut(c)
                .zip(mb.iter_mut().zip(rb.iter_mut()))
                .enumerate()
            {
                let xrow = &xd[(row0 + i) * c..(row0 + i + 1) * c];
                let mut s = Kahan::default();
                let mut ss = Kahan::default();
                for &v in xrow {
                    s.add(v);
                    ss.add(v * v);
                }
                let mu = s.sum * inv_c;
                let var = (ss.sum * inv_c - mu * mu).max(0.0);
                let rs = 1.0 / (var + eps).sqrt();
                *m = mu;
                *r = rs;
                for (((o, &v), &g), &b) in yrow.iter_mut().zip(xrow).zip(gamma).zip(beta) {
                    *o = (v - mu) * rs * g + b;
                }
            }
        });

    record_dispatch();
    let mut out = Tensor::new(x.shape(), y)?;
    if x.precision() == Precision::Bf16E {
        out = out.with_precision(Precision::Bf16E);
    }
    Ok((
        out,
        LnSaved {
            mean: Tensor::new(&[rows], mean)?,
            rstd: Tensor::new(&[rows], rstd)?,
            eps,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct LnGrads {
    pub dx: Tensor,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Backward of [`layernorm_fwd`].
pub fn layernorm_bwd(
    dy: &Tensor,
    x: &Tensor,
    saved: &LnSaved,
    gamma: &[f32],
    rows_per_block: usize,
) -> Result<LnGrads> {
    if dy.shape() != x.shape() {
        return Err(Error::Dimension {
            op: "layernorm_bwd",
            lhs: dy.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if rows_per_block == 0 {
        return Err(Error::Parameter {
            name: "rows_per_block",
            msg: "must be at least 1".into(),
        });
    }
    let (rows, c) = split_rows(x, "layernorm_bwd")?;
    if gamma.len() != c || saved.mean.numel() != rows || saved.rstd.numel() != rows {
        return Err(Error::shape(
            "layernorm_bwd",
            format!(
                "saved statistics for {} rows, gamma {} for input {:?}",
                saved.mean.numel(),
                gamma.len(),
                x.shape()
            ),
        ));
    }
    let num_blocks = rows.div_ceil(rows_per_block);
    let mut dx = vec![0.0f32; rows * c];
    // Stage one: per-block partial sums, laid out as [num_blocks, C] each.
    let mut part_g = vec![0.0f32; num_blocks * c];
    let mut part_b = vec![0.0f32; num_blocks * c];
    let (xd, dyd) = (x.data(), dy.data());
    let (md, rd) = (saved.mean.data(), saved.rstd.data());
    let inv_c = 1.0 / c as f32;

    dx.par_chunks_mut(rows_per_block * c)
        .zip(part_g.par_chunks_mut(c))
        .zip(part_b.par_chunks_mut(c))
        .enumerate()
        .for_each(|(blk, ((dxb, pg), pb))| {
            let row0 = blk * rows_per_block;
            for (i, dxrow) in dxb.chunks_mut(c).enumerate() {
                let r = row0 + i;
                let xrow = &xd[r * c..(r + 1) * c];
                let dyrow = &dyd[r * c..(r + 1) * c];
                let (mu, rs) = (md[r], rd[r]);
                let mut sum_dyg = 0.0f32;
                let mut sum_dyg_xhat = 0.0f32;
                for j in 0..c {
                    let xhat = (xrow[j] - mu) * rs;
                    let dyg = dyrow[j] * gamma[j];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                    pg[j] += dyrow[j] * xhat;
                    pb[j] += dyrow[j];
                }
                let a = sum_dyg * inv_c;
                let b = sum_dyg_xhat * inv_c;
                for j in 0..c {
                    let xhat = (xrow[j] - mu) * rs;
                    dxrow[j] = rs * (dyrow[j] * gamma[j] - a - xhat * b);
                }
            }
        });

    // Stage two: reduce the partial buffers over blocks, ascending.
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for blk in 0..num_blocks {
        for j in 0..c {
            dgamma[j] += part_g[blk * c + j];
            dbeta[j] += part_b[blk * c + j];
        }
    }
    record_dispatch();
    record_dispatch();
    Ok(LnGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dgamma,
        dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(seed)
    }

    /// Two-pass f64 reference.
    fn oracle_fwd(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
        let c = gamma.len();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.push((row[j] as f64 - mean) * rs * gamma[j] as f64 + beta[j] as f64);
            }
        }
        out
    }

    #[test]
    fn constant_row_gives_beta() {
        let x = Tensor::full(&[3, 4], 2.5);
        let beta = [0.1, -0.2, 0.3, 0.4];
        let (y, saved) = layernorm_fwd(&x, &[1.0; 4], &beta, 1e-5, 2).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, &beta);
        }
        assert!(saved.rstd.is_finite());
    }

    #[test]
    fn two_point_standardisation() {
        let x = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _) = layernorm_fwd(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12, 1).unwrap();
        assert!(max_abs_diff(y.data(), &[-1.0, 1.0]) < 1e-5);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::ones(&[1, 2]);
        assert!(matches!(
            layernorm_fwd(&x, &[1.0; 2], &[0.0; 2], 0.0, 1),
            Err(Error::Parameter { name: "eps", .. })
        ));
    }

    #[test]
    fn matches_two_pass_oracle_at_canonical_widths() {
        for &c in &[128usize, 256] {
            let x = Tensor::randn(&[64, c], 1.0, &mut rng(c as u64));
            let gamma: Vec<f32> = Tensor::randn(&[c], 0.5, &mut rng(1)).data().iter().map(|g| 1.0 + g).collect();
            let beta = Tensor::randn(&[c], 0.5, &mut rng(2)).into_data();
            let (y, _) = layernorm_fwd(&x, &gamma, &beta, 1e-5, 4).unwrap();
            let want = oracle_fwd(&x, &gamma, &beta, 1e-5);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0), "C={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng(3));
        let gamma = vec![1.0; 6];
        let (_, saved) = layernorm_fwd(&x, &gamma, &[0.0; 6], 1e-5, 2).unwrap();
        let g = layernorm_bwd(&Tensor::zeros(&[5, 6]), &x, &saved, &gamma, 2).unwrap();
        assert!(g.dx.data().iter().all(|&v| v == 0.0));
        assert!(g.dgamma.iter().chain(&g.dbeta).all(|&v| v == 0.0));
    }

    #[test]
    fn param_grads_match_ordered_direct_sum() {
        let (rows, c, rpb) = (37, 16, 4);
        let x = Tensor::randn(&[rows, c], 1.0, &mut rng(4));
        let dy = Tensor::randn(&[rows, c], 1.0, &mut rng(5));
        let gamma = Tensor::randn(&[c], 1.0, &mut rng(6)).into_data();
        let (_, saved) = layernorm_fwd(&x, &gamma, &vec![0.0; c], 1e-5, rpb).unwrap();
        let g = layernorm_bwd(&dy, &x, &saved, &gamma, rpb).unwrap();

        // Same blocking and order: sum within each block, then over blocks.
        let mut want_g = vec![0.0f32; c];
        let mut want_b = vec![0.0f32; c];
        for blk in 0..rows.div_ceil(rpb) {
            let mut pg = vec![0.0f32; c];
            let mut pb = vec![0.0f32; c];
            for r in blk * rpb..((blk + 1) * rpb).min(rows) {
                for j in 0..c {
                    let xhat = (x.data()[r * c + j] - saved.mean.data()[r]) * saved.rstd.data()[r];
                    pg[j] += dy.data()[r * c + j] * xhat;
                    pb[j] += dy.data()[r * c + j];
                }
            }
            for j in 0..c {
                want_g[j] += pg[j];
                want_b[j] += pb[j];
            }
        }
        assert_eq!(g.dgamma, want_g);
        assert_eq!(g.dbeta, want_b);
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let x = Tensor::randn(&[128, 32], 1.0, &mut rng(7));
        let dy = Tensor::randn(&[128, 32], 1.0, &mut rng(8));
        let gamma = vec![0.7; 32];
        let (_, saved) = layernorm_fwd(&x, &gamma, &[0.0; 32], 1e-5, 8).unwrap();
        let a = layernorm_bwd(&dy, &x, &saved, &gamma, 8).unwrap();
        for _ in 0..5 {
            let b = layernorm_bwd(&dy, &x, &saved, &gamma, 8).unwrap();
            assert_eq!(a.dx, b.dx);
            assert_eq!(a.dgamma, b.dgamma);
            assert_eq!(a.dbeta, b.dbeta);
        }
    }

    #[test]
    fn dx_matches_central_differences() {
        let (rows, c) = (4, 8);
        let x = Tensor::randn(&[rows, c], 1.0, &mut rng(9));
        let gamma = Tensor::randn(&[c], 1.0, &mut rng(10)).into_data();
        let beta = Tensor::randn(&[c], 1.0, &mut rng(11)).into_data();
        let eps = 1e-5;
        let (y, saved) = layernorm_fwd(&x, &gamma, &beta, eps, 1).unwrap();
        // loss = 0.5 * ||y||^2  =>  dy = y
        let g = layernorm_bwd(&y, &x, &saved, &gamma, 1).unwrap();
        let loss = |xs: &Tensor| -> f64 {
            oracle_fwd(xs, &gamma, &beta, eps as f64).iter().map(|v| 0.5 * v * v).sum()
        };
        let h = 1e-3f32;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let step = xp.data()[i] as f64 - xm.data()[i] as f64;
            let fd = (loss(&xp) - loss(&xm)) / step;
            let an = g.dx.data()[i] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1.0), "i={i}: fd={fd} an={an}");
        }
    }
}

//! Q/K/V/G projections issued as one batched GEMM over stacked weights.

use crate::error::{Error, Result};
use crate::tensor::{self, Precision, Tensor};

/// Projects `x: [rows, C]` with four `[C, N]` weights stacked as `[4, C, N]`.
/// Returns `[4, rows, N]` in q, k, v, g order.
pub fn qkvg_project_stacked(x: &Tensor, w: &Tensor, out: Precision) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 3 || w.dim(0) != 4 || w.dim(1) != x.dim(1) {
        return Err(Error::Dimension {
            op: "qkvg_project",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let xs = tensor::concat(&[x, x, x, x], 0)?.reshape(&[4, x.dim(0), x.dim(1)])?;
    tensor::batched_gemm(&xs, w, out)
}

/// Four independent projections computed with a single dispatch.
pub fn qkvg_project(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    w_g: &Tensor,
) -> Result<[Tensor; 4]> {
    for w in [w_k, w_v, w_g] {
        if w.shape() != w_q.shape() {
            return Err(Error::Dimension {
                op: "qkvg_project",
                lhs: w_q.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
    }
    if w_q.rank() != 2 {
        return Err(Error::shape("qkvg_project", "weights must be [C, H*D]"));
    }
    let (c, n) = (w_q.dim(0), w_q.dim(1));
    let stacked = tensor::concat(&[w_q, w_k, w_v, w_g], 0)?.reshape(&[4, c, n])?;
    let out = qkvg_project_stacked(x, &stacked, x.precision())?;
    split4(&out)
}

/// Splits a `[4, rows, N]` tensor into its four `[rows, N]` slices.
pub fn split4(t: &Tensor) -> Result<[Tensor; 4]> {
    let (rows, n) = (t.dim(1), t.dim(2));
    let part = |i: usize| {
        tensor::narrow(t, 0, i, 1).and_then(|s| s.reshape(&[rows, n]))
    };
    Ok([part(0)?, part(1)?, part(2)?, part(3)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dispatch_count;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(seed)
    }

    #[test]
    fn identity_input_returns_weight_rows() {
        let ws: Vec<Tensor> = (0..4).map(|i| Tensor::randn(&[5, 6], 1.0, &mut rng(i))).collect();
        let out = qkvg_project(&Tensor::eye(5), &ws[0], &ws[1], &ws[2], &ws[3]).unwrap();
        for (o, w) in out.iter().zip(&ws) {
            assert_eq!(o, w);
        }
    }

    #[test]
    fn fused_equals_four_gemms_with_one_dispatch() {
        let x = Tensor::randn(&[16, 32], 1.0, &mut rng(10));
        let ws: Vec<Tensor> = (0..4).map(|i| Tensor::randn(&[32, 32], 0.2, &mut rng(20 + i))).collect();

        let before = dispatch_count();
        let separate: Vec<Tensor> = ws
            .iter()
            .map(|w| tensor::gemm(&x, w, Precision::F32).unwrap())
            .collect();
        assert_eq!(dispatch_count() - before, 4);

        let stacked = tensor::concat(&[&ws[0], &ws[1], &ws[2], &ws[3]], 0)
            .unwrap()
            .reshape(&[4, 32, 32])
            .unwrap();
        let before = dispatch_count();
        let fused = qkvg_project_stacked(&x, &stacked, Precision::F32).unwrap();
        assert_eq!(dispatch_count() - before, 1);

        for (f, s) in split4(&fused).unwrap().iter().zip(&separate) {
            assert_eq!(f.data(), s.data());
        }
    }

    #[test]
    fn mismatched_weights_rejected() {
        let x = Tensor::zeros(&[2, 3]);
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[3, 5]);
        assert!(qkvg_project(&x, &a, &a, &b, &a).is_err());
    }
}

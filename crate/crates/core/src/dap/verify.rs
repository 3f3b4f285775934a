//! DAP-N against DAP-1 on one block, plus closed-form communication volumes.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::comm::{run_ranks, wire_bytes, CollectiveKind, CommStats};
use super::shard::{all_reduce_grads, dap_block_forward_backward, gather, scatter, ShardedActivation};
use crate::dap::Local;
use crate::error::Result;
use crate::evoformer::{block_forward_backward, random_inputs, BiasMode, Evoformer, ModelConfig};
use crate::kernels::GradBufferSet;
use crate::runtime::Exec;
use crate::tensor::{Precision, Tensor};

/// Expected `(calls, bytes)` per collective sent by one rank during one
/// block forward and backward, excluding the gradient all-reduce.
pub fn block_comm_volume(cfg: &ModelConfig, n: usize, wire: Precision) -> BTreeMap<CollectiveKind, (u64, u64)> {
    let e = wire_bytes(wire) as u64;
    let n64 = n as u64;
    let (s, r, rl) = (cfg.s as u64, cfg.r as u64, (cfg.r / n) as u64);
    let sl = (cfg.s / n) as u64;
    let (cm, cz, h, co) = (cfg.c_m as u64, cfg.c_z as u64, cfg.heads as u64, cfg.c_opm as u64);

    // three pair-bias sites, each gathering (and reduce-scattering back) one tensor
    let bias_local = match cfg.bias_mode {
        BiasMode::Gather => rl * r * h,
        BiasMode::Recompute => rl * r * cz,
    };
    let opm_local = s * rl * co;
    let gathered = (n64 - 1) * (3 * bias_local + opm_local) * e;
    let a2a_local = 4 * (sl * r * cm + rl * r * cz);
    let a2a = a2a_local * (n64 - 1) / n64 * e;

    let mut m = BTreeMap::new();
    m.insert(CollectiveKind::AllGather, (4, gathered));
    m.insert(CollectiveKind::ReduceScatter, (4, gathered));
    m.insert(CollectiveKind::AllToAll, (8, a2a));
    m
}

/// Bytes rank 0 sends in an all-reduce of `len` elements: every chunk but
/// its own, once in the reduce-scatter and once in the all-gather.
pub fn all_reduce_volume(len: usize, n: usize, wire: Precision) -> u64 {
    let own = len / n;
    (2 * (len - own) * wire_bytes(wire)) as u64
}

#[derive(Clone, Debug)]
pub struct DapCheck {
    pub n: usize,
    /// Normwise relative error of gathered outputs against DAP-1.
    pub fwd_err: f32,
    /// Normwise relative error of all-reduced parameter gradients.
    pub grad_err: f32,
    /// Normwise relative error of gathered input gradients.
    pub input_grad_err: f32,
    pub stats: Vec<CommStats>,
    /// Every rank's block collectives match [`block_comm_volume`].
    pub bytes_match: bool,
}

/// `max|a - b| / max|b|`.
pub fn normwise_rel(a: &[f32], b: &[f32]) -> f32 {
    let scale = b.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn cat(a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut v = a.to_vec();
    v.extend_from_slice(b);
    v
}

/// Runs one block forward and backward on `n` ranks and on one device and
/// compares the results.
pub fn verify_block(cfg: &ModelConfig, n: usize, wire: Precision, seed: u64) -> Result<DapCheck> {
    cfg.validate_dap(n)?;
    let (model, params) = Evoformer::new(cfg.clone(), seed)?;
    let inputs = random_inputs(cfg, seed.wrapping_add(1)).with_precision(cfg.precision);
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(2));
    let gm = Tensor::randn(inputs.msa.shape(), 1.0, &mut rng);
    let gp = Tensor::randn(inputs.pair.shape(), 1.0, &mut rng);
    let w = &model.layout.blocks[0];

    let mut g1 = GradBufferSet::new(&params, 1);
    let mut exec = Exec::new(crate::runtime::PrecisionPolicy::uniform(cfg.precision));
    let ((m1, p1), (dm1, dp1)) =
        block_forward_backward(&mut exec, &Local, cfg, &params, w, &inputs.msa, &inputs.pair, &gm, &gp, &mut g1)?;

    let sm = scatter(&inputs.msa, 0, n)?;
    let sp = scatter(&inputs.pair, 0, n)?;
    let sgm = scatter(&gm, 0, n)?;
    let sgp = scatter(&gp, 0, n)?;
    let ranks = run_ranks(n, wire, |c| {
        let r = crate::dap::Collectives::rank(c);
        let mut exec = Exec::new(crate::runtime::PrecisionPolicy::uniform(cfg.precision));
        let mut g = GradBufferSet::new(&params, 1);
        let out = dap_block_forward_backward(&mut exec, c, cfg, &params, w, &sm[r], &sp[r], &sgm[r], &sgp[r], &mut g)?;
        let block_stats = c.stats();
        all_reduce_grads(c, &mut g)?;
        Ok((out, g.flat(), block_stats))
    })?;

    let expected = block_comm_volume(cfg, n, wire);
    let mut bytes_match = true;
    let mut parts: [Vec<ShardedActivation>; 4] = Default::default();
    let mut grads_n = Vec::new();
    let mut stats = Vec::with_capacity(n);
    for ((out, g, block_stats), all_stats) in ranks {
        for (kind, &(calls, bytes)) in &expected {
            let got = block_stats.get(*kind);
            bytes_match &= got.calls == calls && got.bytes == bytes;
        }
        bytes_match &= block_stats.by_kind.keys().all(|k| expected.contains_key(k));
        for (slot, s) in parts.iter_mut().zip(out) {
            slot.push(s);
        }
        if grads_n.is_empty() {
            grads_n = g;
        }
        stats.push(all_stats);
    }
    let [m, p, dm, dp] = parts;
    let (m, p, dm, dp) = (gather(&m)?, gather(&p)?, gather(&dm)?, gather(&dp)?);

    Ok(DapCheck {
        n,
        fwd_err: normwise_rel(&cat(m.data(), p.data()), &cat(m1.data(), p1.data())),
        grad_err: normwise_rel(&grads_n, &g1.flat()),
        input_grad_err: normwise_rel(&cat(dm.data(), dp.data()), &cat(dm1.data(), dp1.data())),
        stats,
        bytes_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rank_moves_no_bytes() {
        let v = block_comm_volume(&ModelConfig::desk(), 1, Precision::F32);
        assert!(v.values().all(|&(_, b)| b == 0));
        assert_eq!(all_reduce_volume(100, 1, Precision::F32), 0);
    }

    #[test]
    fn all_reduce_volume_even_split() {
        // 2(n-1)/n of the buffer, 4 bytes per element
        assert_eq!(all_reduce_volume(8, 4, Precision::F32), 2 * 6 * 4);
        assert_eq!(all_reduce_volume(8, 4, Precision::Bf16E), 2 * 6 * 2);
    }
}

//! Sharded activations and the DAP block wrapper.

use super::comm::Collectives;
use crate::error::{Error, Result};
use crate::evoformer::{block_forward, block_forward_backward, BlockWeights, ModelConfig};
use crate::kernels::{GradBufferSet, PackedParams};
use crate::runtime::Exec;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardSpec {
    pub axis: usize,
    pub n_shards: usize,
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct ShardedActivation {
    pub local: Tensor,
    pub spec: ShardSpec,
    pub global_shape: Vec<usize>,
}

impl ShardedActivation {
    fn check(&self, op: &'static str) -> Result<()> {
        let ShardSpec { axis, n_shards, rank } = self.spec;
        if n_shards == 0 || rank >= n_shards || axis >= self.global_shape.len() {
            return Err(Error::shape(op, format!("invalid shard spec {:?}", self.spec)));
        }
        let mut want = self.global_shape.clone();
        want[axis] /= n_shards;
        if self.global_shape[axis] % n_shards != 0 || self.local.shape() != want.as_slice() {
            return Err(Error::shape(
                op,
                format!("local {:?} does not match global {:?} / {:?}", self.local.shape(), self.global_shape, self.spec),
            ));
        }
        Ok(())
    }
}

/// Splits `global` into `n` equal slices along `axis`.
pub fn scatter(global: &Tensor, axis: usize, n: usize) -> Result<Vec<ShardedActivation>> {
    if n == 0 {
        return Err(Error::config("dap", "at least one shard required"));
    }
    if axis >= global.rank() {
        return Err(Error::shape("scatter", format!("axis {axis} out of range for {:?}", global.shape())));
    }
    let e = global.dim(axis);
    if e % n != 0 {
        return Err(Error::config("dap", format!("extent {e} of axis {axis} not divisible by {n}")));
    }
    let c = e / n;
    (0..n)
        .map(|rank| {
            Ok(ShardedActivation {
                local: tensor::narrow(global, axis, rank * c, c)?,
                spec: ShardSpec { axis, n_shards: n, rank },
                global_shape: global.shape().to_vec(),
            })
        })
        .collect()
}

/// Concatenates shards (in rank order) back into the global tensor.
pub fn gather(shards: &[ShardedActivation]) -> Result<Tensor> {
    let first = shards.first().ok_or_else(|| Error::shape("gather", "no shards"))?;
    for (r, s) in shards.iter().enumerate() {
        s.check("gather")?;
        if s.spec.rank != r || s.spec.axis != first.spec.axis || s.spec.n_shards != shards.len() {
            return Err(Error::shape("gather", format!("shard {r} has spec {:?}", s.spec)));
        }
        if s.global_shape != first.global_shape {
            return Err(Error::shape("gather", "global shapes differ"));
        }
    }
    let refs: Vec<&Tensor> = shards.iter().map(|s| &s.local).collect();
    tensor::concat(&refs, first.spec.axis)
}

fn check_rank<C: Collectives + ?Sized>(comm: &C, s: &ShardedActivation, op: &'static str) -> Result<()> {
    s.check(op)?;
    if s.spec.n_shards != comm.size() || s.spec.rank != comm.rank() {
        return Err(Error::Protocol(format!(
            "{op}: shard {:?} on rank {} of {}",
            s.spec,
            comm.rank(),
            comm.size()
        )));
    }
    Ok(())
}

/// Global tensor on every rank.
pub fn all_gather<C: Collectives + ?Sized>(comm: &C, shard: &ShardedActivation) -> Result<Tensor> {
    check_rank(comm, shard, "all_gather")?;
    let g = comm.all_gather(&shard.local, shard.spec.axis)?;
    if g.shape() != shard.global_shape.as_slice() {
        return Err(Error::Protocol(format!(
            "all_gather: assembled {:?}, expected {:?}",
            g.shape(),
            shard.global_shape
        )));
    }
    Ok(g)
}

/// Same global tensor, now split along `new_axis`.
pub fn all_to_all_reshard<C: Collectives + ?Sized>(
    comm: &C,
    shard: &ShardedActivation,
    new_axis: usize,
) -> Result<ShardedActivation> {
    check_rank(comm, shard, "all_to_all_reshard")?;
    if new_axis >= shard.global_shape.len() {
        return Err(Error::shape("all_to_all_reshard", format!("axis {new_axis} out of range")));
    }
    if shard.global_shape[new_axis] % comm.size() != 0 {
        return Err(Error::config(
            "dap",
            format!("extent {} of axis {new_axis} not divisible by {}", shard.global_shape[new_axis], comm.size()),
        ));
    }
    let local = comm.all_to_all(&shard.local, shard.spec.axis, new_axis)?;
    Ok(ShardedActivation {
        local,
        spec: ShardSpec {
            axis: new_axis,
            ..shard.spec
        },
        global_shape: shard.global_shape.clone(),
    })
}

/// Sums every gradient buffer across ranks.
pub fn all_reduce_grads<C: Collectives + ?Sized>(comm: &C, grads: &mut GradBufferSet) -> Result<()> {
    for b in grads.buffers_mut() {
        comm.all_reduce_sum(b)?;
    }
    Ok(())
}

fn block_layout<C: Collectives + ?Sized>(
    comm: &C,
    cfg: &ModelConfig,
    msa: &ShardedActivation,
    pair: &ShardedActivation,
) -> Result<()> {
    cfg.validate_dap(comm.size())?;
    check_rank(comm, msa, "dap_evoformer_block")?;
    check_rank(comm, pair, "dap_evoformer_block")?;
    if msa.spec.axis != 0 || msa.global_shape != [cfg.s, cfg.r, cfg.c_m] {
        return Err(Error::shape("dap_evoformer_block", "msa must be [S, R, c_m] split along S"));
    }
    if pair.spec.axis != 0 || pair.global_shape != [cfg.r, cfg.r, cfg.c_z] {
        return Err(Error::shape("dap_evoformer_block", "pair must be [R, R, c_z] split along rows"));
    }
    Ok(())
}

fn rewrap(local: Tensor, like: &ShardedActivation) -> ShardedActivation {
    ShardedActivation {
        local,
        spec: like.spec,
        global_shape: like.global_shape.clone(),
    }
}

/// One block on this rank's shards; outputs keep the input sharding.
pub fn dap_evoformer_block<C: Collectives + ?Sized>(
    exec: &mut Exec,
    comm: &C,
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &ShardedActivation,
    pair: &ShardedActivation,
) -> Result<(ShardedActivation, ShardedActivation)> {
    block_layout(comm, cfg, msa, pair)?;
    let (m, p) = block_forward(exec, comm, cfg, params, w, &msa.local, &pair.local)?;
    Ok((rewrap(m, msa), rewrap(p, pair)))
}

/// Forward and backward of one block on this rank's shards for the loss
/// `sum(msa' * gm) + sum(pair' * gp)`. Parameter gradients in `grads` are
/// this rank's partial sums; see [`all_reduce_grads`].
#[allow(clippy::too_many_arguments)]
pub fn dap_block_forward_backward<C: Collectives + ?Sized>(
    exec: &mut Exec,
    comm: &C,
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &ShardedActivation,
    pair: &ShardedActivation,
    gm: &ShardedActivation,
    gp: &ShardedActivation,
    grads: &mut GradBufferSet,
) -> Result<[ShardedActivation; 4]> {
    block_layout(comm, cfg, msa, pair)?;
    check_rank(comm, gm, "dap_block_forward_backward")?;
    check_rank(comm, gp, "dap_block_forward_backward")?;
    let ((m, p), (dm, dp)) = block_forward_backward(
        exec,
        comm,
        cfg,
        params,
        w,
        &msa.local,
        &pair.local,
        &gm.local,
        &gp.local,
        grads,
    )?;
    Ok([rewrap(m, msa), rewrap(p, pair), rewrap(dm, msa), rewrap(dp, pair)])
}

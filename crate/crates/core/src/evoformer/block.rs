//! One Evoformer block, written once for any number of ranks.
//!
//! Layout on entry and exit: msa `[S_l, R, c_m]` split along sequences, pair
//! `[R_l, R, c_z]` split along its first residue axis. Column attention, the
//! MSA transition and the outer product mean run on the residue-split msa;
//! triangle attention around the ending node runs on rows of the transposed
//! pair.

use super::layers::{
    gated_attention, gated_attention_bwd, outer_product_mean, outer_product_mean_bwd, pair_bias,
    pair_bias_bwd, permute, residual, transition, transition_bwd, Env, GaCache, OpmCache, PbCache,
    TransCache,
};
use super::params::BlockWeights;
use crate::dap::Collectives;
use crate::error::Result;
use crate::kernels::GradBufferSet;
use crate::runtime::Module;
use crate::tensor::Tensor;

pub struct BlockCache {
    row_bias: Tensor,
    row_pb: PbCache,
    row: GaCache,
    col: GaCache,
    msa_trans: TransCache,
    opm: OpmCache,
    ts_bias: Tensor,
    ts_pb: PbCache,
    ts: GaCache,
    te_bias: Tensor,
    te_pb: PbCache,
    te: GaCache,
    pair_trans: TransCache,
}

impl BlockCache {
    /// Activation bytes retained for the backward pass.
    pub fn bytes(&self) -> usize {
        self.row_bias.size_bytes()
            + self.ts_bias.size_bytes()
            + self.te_bias.size_bytes()
            + self.row_pb.bytes()
            + self.ts_pb.bytes()
            + self.te_pb.bytes()
            + self.row.bytes()
            + self.col.bytes()
            + self.ts.bytes()
            + self.te.bytes()
            + self.msa_trans.bytes()
            + self.pair_trans.bytes()
            + self.opm.bytes()
    }
}

pub(crate) fn block_fwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    w: &BlockWeights,
    mut msa: Tensor,
    mut pair: Tensor,
) -> Result<(Tensor, Tensor, BlockCache)> {
    env.exec.set_module(Module::PairBias);
    let (row_bias, row_pb) = pair_bias(env, &w.row_bias, &pair)?;
    env.exec.set_module(Module::RowAttention);
    let (d, row) = gated_attention(env, &w.row, &msa, Some(&row_bias))?;
    residual(env, &mut msa, &d)?;

    let msa_r = env.comm.all_to_all(&msa, 0, 1)?;
    env.exec.set_module(Module::ColAttention);
    let mut mt = permute(env, &msa_r, &[1, 0, 2])?;
    let (d, col) = gated_attention(env, &w.col, &mt, None)?;
    residual(env, &mut mt, &d)?;
    env.exec.set_module(Module::MsaTransition);
    let (d, msa_trans) = transition(env, &w.msa_trans, &mt)?;
    residual(env, &mut mt, &d)?;
    let msa_r = permute(env, &mt, &[1, 0, 2])?;

    env.exec.set_module(Module::OuterProductMean);
    let (d, opm) = outer_product_mean(env, &w.opm, &msa_r)?;
    residual(env, &mut pair, &d)?;
    let msa = env.comm.all_to_all(&msa_r, 1, 0)?;

    env.exec.set_module(Module::PairBias);
    let (ts_bias, ts_pb) = pair_bias(env, &w.tri_start_bias, &pair)?;
    env.exec.set_module(Module::TriangleStart);
    let (d, ts) = gated_attention(env, &w.tri_start, &pair, Some(&ts_bias))?;
    residual(env, &mut pair, &d)?;

    let pc = env.comm.all_to_all(&pair, 0, 1)?;
    let pt = permute(env, &pc, &[1, 0, 2])?;
    env.exec.set_module(Module::PairBias);
    let (te_bias, te_pb) = pair_bias(env, &w.tri_end_bias, &pt)?;
    env.exec.set_module(Module::TriangleEnd);
    let (dt, te) = gated_attention(env, &w.tri_end, &pt, Some(&te_bias))?;
    let dc = permute(env, &dt, &[1, 0, 2])?;
    let d = env.comm.all_to_all(&dc, 1, 0)?;
    residual(env, &mut pair, &d)?;

    env.exec.set_module(Module::PairTransition);
    let (d, pair_trans) = transition(env, &w.pair_trans, &pair)?;
    residual(env, &mut pair, &d)?;

    Ok((
        msa,
        pair,
        BlockCache {
            row_bias,
            row_pb,
            row,
            col,
            msa_trans,
            opm,
            ts_bias,
            ts_pb,
            ts,
            te_bias,
            te_pb,
            te,
            pair_trans,
        },
    ))
}

/// Maps output gradients to input gradients, accumulating parameter
/// gradients into `grads`.
pub(crate) fn block_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    w: &BlockWeights,
    cache: &BlockCache,
    dmsa: Tensor,
    mut dpair: Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = transition_bwd(env, grads, &w.pair_trans, &cache.pair_trans, &dpair)?;
    residual(env, &mut dpair, &d)?;

    let dc = env.comm.all_to_all(&dpair, 0, 1)?;
    let ddt = permute(env, &dc, &[1, 0, 2])?;
    let (mut dpt, dbias) =
        gated_attention_bwd(env, grads, &w.tri_end, &cache.te, &ddt, Some(&cache.te_bias))?;
    let d = pair_bias_bwd(env, grads, &w.tri_end_bias, &cache.te_pb, &dbias.expect("bias given"))?;
    residual(env, &mut dpt, &d)?;
    let dpc = permute(env, &dpt, &[1, 0, 2])?;
    let d = env.comm.all_to_all(&dpc, 1, 0)?;
    residual(env, &mut dpair, &d)?;

    let (dx, dbias) =
        gated_attention_bwd(env, grads, &w.tri_start, &cache.ts, &dpair, Some(&cache.ts_bias))?;
    let d = pair_bias_bwd(env, grads, &w.tri_start_bias, &cache.ts_pb, &dbias.expect("bias given"))?;
    residual(env, &mut dpair, &dx)?;
    residual(env, &mut dpair, &d)?;

    let mut dmsa_r = env.comm.all_to_all(&dmsa, 0, 1)?;
    let d = outer_product_mean_bwd(env, grads, &w.opm, &cache.opm, &dpair)?;
    residual(env, &mut dmsa_r, &d)?;

    let mut dmt = permute(env, &dmsa_r, &[1, 0, 2])?;
    let d = transition_bwd(env, grads, &w.msa_trans, &cache.msa_trans, &dmt)?;
    residual(env, &mut dmt, &d)?;
    let (d, _) = gated_attention_bwd(env, grads, &w.col, &cache.col, &dmt, None)?;
    residual(env, &mut dmt, &d)?;
    let dmsa_r = permute(env, &dmt, &[1, 0, 2])?;
    let mut dmsa = env.comm.all_to_all(&dmsa_r, 1, 0)?;

    let (d, dbias) = gated_attention_bwd(env, grads, &w.row, &cache.row, &dmsa, Some(&cache.row_bias))?;
    residual(env, &mut dmsa, &d)?;
    let d = pair_bias_bwd(env, grads, &w.row_bias, &cache.row_pb, &dbias.expect("bias given"))?;
    residual(env, &mut dpair, &d)?;
    Ok((dmsa, dpair))
}

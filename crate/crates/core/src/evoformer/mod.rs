//! Scaled-down Evoformer with hand-written backward passes and recycling.

mod block;
pub mod config;
pub(crate) mod layers;
pub mod model;
pub mod params;

pub use block::BlockCache;
pub use config::{BiasMode, ModelConfig};
pub use model::{mse_loss, random_inputs, structure_stub, Evoformer, InputGrads, Inputs, LossOut, Outputs};
pub use params::{load_checkpoint, save_checkpoint, zero_matching, BlockWeights, ModelLayout};

use crate::dap::{Collectives, Local};
use crate::error::Result;
use crate::kernels::{GradBufferSet, PackedParams};
use crate::runtime::Exec;
use crate::tensor::Tensor;
use layers::Env;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriangleMode {
    Start,
    End,
}

fn local_env<'a>(exec: &'a mut Exec, params: &'a PackedParams, cfg: &'a ModelConfig) -> Env<'a, Local> {
    Env {
        exec,
        comm: &Local,
        params,
        cfg,
    }
}

/// Residual delta of MSA row attention with pair bias, single device.
pub fn msa_row_attention(
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &Tensor,
    pair: &Tensor,
) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    let (bias, _) = layers::pair_bias(&mut env, &w.row_bias, pair)?;
    Ok(layers::gated_attention(&mut env, &w.row, msa, Some(&bias))?.0)
}

/// Residual delta of MSA column attention (attends along sequences).
pub fn msa_col_attention(cfg: &ModelConfig, params: &PackedParams, w: &BlockWeights, msa: &Tensor) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    let mt = layers::permute(&mut env, msa, &[1, 0, 2])?;
    let (d, _) = layers::gated_attention(&mut env, &w.col, &mt, None)?;
    layers::permute(&mut env, &d, &[1, 0, 2])
}

pub fn msa_transition(cfg: &ModelConfig, params: &PackedParams, w: &BlockWeights, msa: &Tensor) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    Ok(layers::transition(&mut env, &w.msa_trans, msa)?.0)
}

pub fn pair_transition(cfg: &ModelConfig, params: &PackedParams, w: &BlockWeights, pair: &Tensor) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    Ok(layers::transition(&mut env, &w.pair_trans, pair)?.0)
}

pub fn outer_product_mean(cfg: &ModelConfig, params: &PackedParams, w: &BlockWeights, msa: &Tensor) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    Ok(layers::outer_product_mean(&mut env, &w.opm, msa)?.0)
}

/// Triangle attention delta. End mode runs the start-mode computation on
/// the transposed pair and transposes the result back.
pub fn triangle_attention(
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    pair: &Tensor,
    mode: TriangleMode,
) -> Result<Tensor> {
    let mut exec = Exec::default();
    let mut env = local_env(&mut exec, params, cfg);
    match mode {
        TriangleMode::Start => {
            let (bias, _) = layers::pair_bias(&mut env, &w.tri_start_bias, pair)?;
            Ok(layers::gated_attention(&mut env, &w.tri_start, pair, Some(&bias))?.0)
        }
        TriangleMode::End => {
            let pt = layers::permute(&mut env, pair, &[1, 0, 2])?;
            let (bias, _) = layers::pair_bias(&mut env, &w.tri_end_bias, &pt)?;
            let (d, _) = layers::gated_attention(&mut env, &w.tri_end, &pt, Some(&bias))?;
            layers::permute(&mut env, &d, &[1, 0, 2])
        }
    }
}

/// One block on a single device.
pub fn evoformer_block(
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &Tensor,
    pair: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut exec = Exec::default();
    block_forward(&mut exec, &Local, cfg, params, w, msa, pair)
}

/// One block on any number of ranks (sharded inputs on entry and exit).
pub fn block_forward<C: Collectives + ?Sized>(
    exec: &mut Exec,
    comm: &C,
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &Tensor,
    pair: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut env = Env { exec, comm, params, cfg };
    let (m, p, _) = block::block_fwd(&mut env, w, msa.clone(), pair.clone())?;
    Ok((m, p))
}

/// Forward and backward of one block for the scalar loss
/// `sum(msa' * gm) + sum(pair' * gp)`. Returns the outputs and the input
/// gradients; parameter gradients are accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_backward<C: Collectives + ?Sized>(
    exec: &mut Exec,
    comm: &C,
    cfg: &ModelConfig,
    params: &PackedParams,
    w: &BlockWeights,
    msa: &Tensor,
    pair: &Tensor,
    gm: &Tensor,
    gp: &Tensor,
    grads: &mut GradBufferSet,
) -> Result<((Tensor, Tensor), (Tensor, Tensor))> {
    let mut env = Env { exec, comm, params, cfg };
    let (m, p, cache) = block::block_fwd(&mut env, w, msa.clone(), pair.clone())?;
    let d = block::block_bwd(&mut env, grads, w, &cache, gm.clone(), gp.clone())?;
    Ok(((m, p), d))
}

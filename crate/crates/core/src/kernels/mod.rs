//! Fused kernels: layer norm, pair-biased attention, projections, optimizer.

pub mod attention;
pub mod autotune;
pub mod bench;
pub mod layernorm;
pub mod optim;
pub mod projection;

pub use attention::{attn_pair_bias_bwd, attn_pair_bias_fwd, AttnGrads, AttnSaved, AttnTiles};
pub use autotune::{machine_fingerprint, Autotuner, CacheRecord, KernelConfig, TuneCache, TuneResult};
pub use layernorm::{layernorm_bwd, layernorm_fwd, LnGrads, LnSaved};
pub use optim::{
    clip_grads_global_norm, clip_with_norm, fused_adam_swa_step, AdamSwaHyper, GradBufferSet, OptimState,
    PackedParams, SegId,
};
pub use projection::{qkvg_project, qkvg_project_stacked};

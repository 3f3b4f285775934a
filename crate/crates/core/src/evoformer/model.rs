//! Block stack with recycling, the pooled structure stage and the synthetic
//! regression loss.

use std::time::{Duration, Instant};

use super::block::{block_bwd, block_fwd, BlockCache};
use super::config::ModelConfig;
use super::layers::{ln, ln_bwd, residual, Env};
use super::params::ModelLayout;
use crate::dap::{Collectives, Local};
use crate::error::{Error, Result};
use crate::kernels::{GradBufferSet, KernelConfig, LnSaved, PackedParams};
use crate::runtime::{Exec, Module, OpCategory};
use crate::tensor::{self, record_dispatch, Precision, Tensor};

/// Model inputs on one rank: msa `[S_l, R, c_m]`, pair `[R_l, R, c_z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub msa: Tensor,
    pub pair: Tensor,
}

impl Inputs {
    pub fn with_precision(self, p: Precision) -> Self {
        Self {
            msa: self.msa.with_precision(p),
            pair: self.pair.with_precision(p),
        }
    }
}

/// Final-iteration outputs of the stack.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub msa: Tensor,
    pub pair: Tensor,
    pub features: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct LossOut {
    pub loss: f32,
    pub outputs: Outputs,
}

/// Gradients wrt the inputs of the tracked iteration.
#[derive(Clone, Debug)]
pub struct InputGrads {
    pub msa: Tensor,
    pub pair: Tensor,
}

enum Record {
    Full(BlockCache),
    Inputs(Tensor, Tensor),
}

struct RecycleCache {
    msa_row0: Option<(Tensor, LnSaved)>,
    pair: (Tensor, LnSaved),
}

#[derive(Clone, Debug)]
pub struct Evoformer {
    pub cfg: ModelConfig,
    pub layout: ModelLayout,
    /// Busy-wait added by the structure stage.
    pub structure_cost: Duration,
}

/// Mean squared error and its gradient wrt `features`.
pub fn mse_loss(features: &[f32], target: &[f32]) -> Result<(f32, Vec<f32>)> {
    if features.len() != target.len() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: vec![features.len()],
            rhs: vec![target.len()],
        });
    }
    let n = features.len() as f32;
    let mut loss = 0.0f32;
    let mut grad = Vec::with_capacity(features.len());
    for (f, t) in features.iter().zip(target) {
        let d = f - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

fn busy_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    let t0 = Instant::now();
    while t0.elapsed() < d {
        std::hint::spin_loop();
    }
}

/// Per-channel means of msa and pair, concatenated, followed by an optional
/// busy-wait standing in for a serial structure stage.
pub fn structure_stub(msa: &Tensor, pair: &Tensor, cost: Duration) -> Vec<f32> {
    let mut f = channel_sums(msa);
    let n = (msa.numel() / f.len().max(1)).max(1) as f32;
    f.iter_mut().for_each(|v| *v /= n);
    let mut p = channel_sums(pair);
    let n = (pair.numel() / p.len().max(1)).max(1) as f32;
    p.iter_mut().for_each(|v| *v /= n);
    f.extend(p);
    busy_wait(cost);
    f
}

fn channel_sums(x: &Tensor) -> Vec<f32> {
    let c = *x.shape().last().unwrap_or(&1);
    let mut s = vec![0.0f32; c];
    for row in x.data().chunks(c) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

impl Evoformer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, PackedParams)> {
        let (layout, params) = ModelLayout::init(&cfg, seed)?;
        Ok((
            Self {
                cfg,
                layout,
                structure_cost: Duration::ZERO,
            },
            params,
        ))
    }

    /// Dimension of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.cfg.c_m + self.cfg.c_z
    }

    fn check_n_recycle(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.cfg.n_recycle_max {
            return Err(Error::config(
                "n_recycle",
                format!("{n} outside 1..={}", self.cfg.n_recycle_max),
            ));
        }
        Ok(())
    }

    fn embed<C: Collectives + ?Sized>(
        &self,
        env: &mut Env<'_, C>,
        inputs: &Inputs,
        prev: Option<&(Tensor, Tensor)>,
    ) -> Result<(Tensor, Tensor, Option<RecycleCache>)> {
        let mut msa = inputs.msa.clone();
        let mut pair = inputs.pair.clone();
        let Some((pm, pp)) = prev else {
            return Ok((msa, pair, None));
        };
        env.exec.set_module(Module::Recycle);
        let l = &self.layout;
        let msa_row0 = if env.comm.rank() == 0 {
            let row0 = tensor::narrow(pm, 0, 0, 1)?;
            let (e, saved) = ln(env, &row0, l.rec_msa_g, l.rec_msa_b)?;
            let n = e.numel();
            let shape = msa.shape().to_vec();
            env.exec
                .launch("recycle_add", OpCategory::MemoryBound, &[&shape], &KernelConfig::default(), |_| {
                    record_dispatch();
                    let bf16 = msa.precision() == Precision::Bf16E;
                    let head = &mut msa.data_mut()[..n];
                    for (m, v) in head.iter_mut().zip(e.data()) {
                        *m += v;
                    }
                    if bf16 {
                        tensor::round_bf16_slice(head);
                    }
                    Ok(())
                })?;
            Some((row0, saved))
        } else {
            None
        };
        let (e, saved) = ln(env, pp, l.rec_pair_g, l.rec_pair_b)?;
        residual(env, &mut pair, &e)?;
        Ok((
            msa,
            pair,
            Some(RecycleCache {
                msa_row0,
                pair: (pp.clone(), saved),
            }),
        ))
    }

    fn features<C: Collectives + ?Sized>(
        &self,
        env: &mut Env<'_, C>,
        msa: &Tensor,
        pair: &Tensor,
    ) -> Result<Vec<f32>> {
        env.exec.set_module(Module::Structure);
        let cfg = &self.cfg;
        let mut f = env.exec.launch(
            "structure_pool",
            OpCategory::MemoryBound,
            &[msa.shape(), pair.shape()],
            &KernelConfig::default(),
            |_| {
                record_dispatch();
                let mut f = channel_sums(msa);
                f.extend(channel_sums(pair));
                Ok(f)
            },
        )?;
        env.comm.all_reduce_sum(&mut f)?;
        let (nm, np) = ((cfg.s * cfg.r) as f32, (cfg.r * cfg.r) as f32);
        for (i, v) in f.iter_mut().enumerate() {
            *v /= if i < cfg.c_m { nm } else { np };
        }
        busy_wait(self.structure_cost);
        Ok(f)
    }

    /// One pass through the stack without retaining activations.
    pub fn run_iteration<C: Collectives + ?Sized>(
        &self,
        exec: &mut Exec,
        comm: &C,
        params: &PackedParams,
        inputs: &Inputs,
        prev: Option<&(Tensor, Tensor)>,
    ) -> Result<(Tensor, Tensor)> {
        let mut env = Env {
            exec,
            comm,
            params,
            cfg: &self.cfg,
        };
        let (mut msa, mut pair, _) = self.embed(&mut env, inputs, prev)?;
        for w in &self.layout.blocks {
            let (m, p, _) = block_fwd(&mut env, w, msa, pair)?;
            msa = m;
            pair = p;
        }
        Ok((msa, pair))
    }

    /// Inference with `n_recycle` passes.
    pub fn forward<C: Collectives + ?Sized>(
        &self,
        exec: &mut Exec,
        comm: &C,
        params: &PackedParams,
        inputs: &Inputs,
        n_recycle: usize,
    ) -> Result<Outputs> {
        self.check_n_recycle(n_recycle)?;
        let mut prev = None;
        for _ in 0..n_recycle {
            prev = Some(self.run_iteration(exec, comm, params, inputs, prev.as_ref())?);
        }
        let (msa, pair) = prev.expect("n_recycle >= 1");
        let mut env = Env {
            exec,
            comm,
            params,
            cfg: &self.cfg,
        };
        let features = self.features(&mut env, &msa, &pair)?;
        Ok(Outputs { msa, pair, features })
    }

    /// Loss and parameter gradients with `n_recycle` passes; only the last
    /// pass is differentiated.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad<C: Collectives + ?Sized>(
        &self,
        exec: &mut Exec,
        comm: &C,
        params: &PackedParams,
        inputs: &Inputs,
        n_recycle: usize,
        target: &[f32],
        grads: &mut GradBufferSet,
    ) -> Result<LossOut> {
        self.check_n_recycle(n_recycle)?;
        let mut prev = None;
        for _ in 0..n_recycle - 1 {
            prev = Some(self.run_iteration(exec, comm, params, inputs, prev.as_ref())?);
        }
        let (out, _) = self.tracked_loss_and_grad(exec, comm, params, inputs, prev.as_ref(), target, grads)?;
        Ok(out)
    }

    /// Differentiated pass given (detached) recycled outputs `prev`.
    #[allow(clippy::too_many_arguments)]
    pub fn tracked_loss_and_grad<C: Collectives + ?Sized>(
        &self,
        exec: &mut Exec,
        comm: &C,
        params: &PackedParams,
        inputs: &Inputs,
        prev: Option<&(Tensor, Tensor)>,
        target: &[f32],
        grads: &mut GradBufferSet,
    ) -> Result<(LossOut, InputGrads)> {
        let mut env = Env {
            exec,
            comm,
            params,
            cfg: &self.cfg,
        };
        let (mut msa, mut pair, rec) = self.embed(&mut env, inputs, prev)?;
        let mut records = Vec::with_capacity(self.layout.blocks.len());
        for w in &self.layout.blocks {
            let (m, p, cache) = if self.cfg.checkpointing {
                let held = msa.size_bytes() + pair.size_bytes();
                env.exec.mem_mut().hold(held);
                let inputs = (msa.clone(), pair.clone());
                let (m, p, cache) = block_fwd(&mut env, w, msa, pair)?;
                drop(cache);
                (m, p, Record::Inputs(inputs.0, inputs.1))
            } else {
                let (m, p, cache) = block_fwd(&mut env, w, msa, pair)?;
                env.exec.mem_mut().hold(cache.bytes());
                (m, p, Record::Full(cache))
            };
            records.push(cache);
            msa = m;
            pair = p;
        }
        let features = self.features(&mut env, &msa, &pair)?;
        let (loss, dfeat) = mse_loss(&features, target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss", index: 0 });
        }

        let cfg = &self.cfg;
        let (nm, np) = ((cfg.s * cfg.r) as f32, (cfg.r * cfg.r) as f32);
        let dm: Vec<f32> = dfeat[..cfg.c_m].iter().map(|v| v / nm).collect();
        let dp: Vec<f32> = dfeat[cfg.c_m..].iter().map(|v| v / np).collect();
        let mut dmsa = Tensor::from_fn(msa.shape(), |i| dm[i % cfg.c_m]);
        let mut dpair = Tensor::from_fn(pair.shape(), |i| dp[i % cfg.c_z]);

        for (w, rec) in self.layout.blocks.iter().zip(records).rev() {
            let (dm, dp) = match rec {
                Record::Full(cache) => {
                    let r = block_bwd(&mut env, grads, w, &cache, dmsa, dpair)?;
                    env.exec.mem_mut().release(cache.bytes());
                    r
                }
                Record::Inputs(m, p) => {
                    let held = m.size_bytes() + p.size_bytes();
                    env.exec.set_recomputing(true);
                    let fwd = block_fwd(&mut env, w, m, p);
                    env.exec.set_recomputing(false);
                    let (_, _, cache) = fwd?;
                    env.exec.mem_mut().hold(cache.bytes());
                    let r = block_bwd(&mut env, grads, w, &cache, dmsa, dpair)?;
                    env.exec.mem_mut().release(cache.bytes() + held);
                    r
                }
            };
            dmsa = dm;
            dpair = dp;
        }

        if let Some(rec) = rec {
            env.exec.set_module(Module::Recycle);
            let l = &self.layout;
            if let Some((row0, saved)) = &rec.msa_row0 {
                let n = row0.numel();
                let d0 = Tensor::new(row0.shape(), dmsa.data()[..n].to_vec())?;
                ln_bwd(&mut env, grads, &d0, row0, saved, l.rec_msa_g, l.rec_msa_b)?;
            }
            let (pp, saved) = &rec.pair;
            ln_bwd(&mut env, grads, &dpair, pp, saved, l.rec_pair_g, l.rec_pair_b)?;
        }

        Ok((
            LossOut {
                loss,
                outputs: Outputs { msa, pair, features },
            },
            InputGrads { msa: dmsa, pair: dpair },
        ))
    }

    /// Single-device convenience wrapper around [`Evoformer::loss_and_grad`].
    pub fn loss_and_grad_local(
        &self,
        params: &PackedParams,
        inputs: &Inputs,
        n_recycle: usize,
        target: &[f32],
        grads: &mut GradBufferSet,
    ) -> Result<f32> {
        let mut exec = Exec::default();
        Ok(self
            .loss_and_grad(&mut exec, &Local, params, inputs, n_recycle, target, grads)?
            .loss)
    }

    /// Single-device convenience wrapper around [`Evoformer::forward`].
    pub fn forward_local(&self, params: &PackedParams, inputs: &Inputs, n_recycle: usize) -> Result<Outputs> {
        let mut exec = Exec::default();
        self.forward(&mut exec, &Local, params, inputs, n_recycle)
    }
}

/// Synthetic unit-scale inputs for the full (unsharded) model.
pub fn random_inputs(cfg: &ModelConfig, seed: u64) -> Inputs {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Inputs {
        msa: Tensor::randn(&[cfg.s, cfg.r, cfg.c_m], 1.0, &mut rng),
        pair: Tensor::randn(&[cfg.r, cfg.r, cfg.c_z], 1.0, &mut rng),
    }
}

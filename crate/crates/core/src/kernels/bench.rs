//! Unfused baselines, candidate sets and the kernel benchmark sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::attention::{attn_pair_bias_fwd, AttnTiles};
use super::autotune::{median, Autotuner, KernelConfig, TuneCache, TuneResult};
use super::layernorm::layernorm_fwd;
use super::optim::{clip_grads_global_norm, fused_adam_swa_step, global_norm_per_tensor};
use super::optim::{AdamSwaHyper, GradBufferSet, OptimState, PackedParams};
use crate::error::Result;
use crate::runtime::signature;
use crate::tensor::{self, Precision, Tensor};

pub const ATTN_OP: &str = "attention_fwd";
pub const LN_OP: &str = "layernorm_fwd";
pub const ADAM_OP: &str = "adam_swa";
pub const CLIP_OP: &str = "clip_global_norm";

pub const BENCH_HEADER: &str = "op,signature,config,median_s,speedup_vs_naive";

pub fn attention_candidates() -> Vec<KernelConfig> {
    let sizes = [8, 16, 32, 64];
    sizes
        .iter()
        .flat_map(|&q| sizes.iter().map(move |&k| KernelConfig::tiles(q, k)))
        .collect()
}

pub fn layernorm_candidates() -> Vec<KernelConfig> {
    [1, 4, 16, 64].into_iter().map(KernelConfig::rows).collect()
}

/// Materialized attention: per (batch, head) slice, `QK^T`, bias add,
/// softmax, `PV` and the gate as separate ops.
pub fn naive_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    gate: Option<&Tensor>,
    scale: f32,
) -> Result<Tensor> {
    let (b, h, l, d) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    let mut out = Vec::with_capacity(q.numel());
    for bi in 0..b {
        for hi in 0..h {
            let bh = bi * h + hi;
            let take = |t: &Tensor| Tensor::new(&[l, d], t.data()[bh * l * d..(bh + 1) * l * d].to_vec());
            let (qs, ks, vs) = (take(q)?, take(k)?, take(v)?);
            let kt = tensor::transpose2d(&ks)?;
            let mut logits = tensor::scale(&tensor::gemm(&qs, &kt, Precision::F32)?, scale);
            if let Some(bt) = bias {
                let off = if bt.rank() == 4 { bh } else { hi } * l * l;
                let bs = Tensor::new(&[l, l], bt.data()[off..off + l * l].to_vec())?;
                logits = tensor::add(&logits, &bs)?;
            }
            let p = tensor::softmax_lastdim(&logits)?;
            let mut o = tensor::gemm(&p, &vs, Precision::F32)?;
            if let Some(g) = gate {
                o = tensor::mul(&o, &tensor::sigmoid(&take(g)?))?;
            }
            out.extend_from_slice(o.data());
        }
    }
    Tensor::new(q.shape(), out)
}

/// Separate passes for mean, variance, normalize and affine.
pub fn naive_layernorm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&1);
    let rows = x.numel() / c.max(1);
    let xd = x.data();
    let mean: Vec<f32> = (0..rows)
        .map(|r| xd[r * c..(r + 1) * c].iter().sum::<f32>() / c as f32)
        .collect();
    let var: Vec<f32> = (0..rows)
        .map(|r| {
            xd[r * c..(r + 1) * c]
                .iter()
                .map(|&v| (v - mean[r]) * (v - mean[r]))
                .sum::<f32>()
                / c as f32
        })
        .collect();
    let norm: Vec<f32> = (0..rows * c)
        .map(|i| (xd[i] - mean[i / c]) / (var[i / c] + eps).sqrt())
        .collect();
    let y = (0..rows * c).map(|i| norm[i] * gamma[i % c] + beta[i % c]).collect();
    Tensor::new(x.shape(), y)
}

/// Adam + SWA as five sequential elementwise passes with temporaries.
pub fn naive_adam_swa(p: &mut [f32], g: &[f32], st: &mut OptimState, global_scale: f32) {
    st.step_count += 1;
    let h = st.hyper;
    let (bc1, bc2) = h.bias_corrections(st.step_count);
    let gs: Vec<f32> = g.iter().map(|&x| x * global_scale).collect();
    st.m = st.m.iter().zip(&gs).map(|(&m, &g)| h.beta1 * m + (1.0 - h.beta1) * g).collect();
    st.v = st.v.iter().zip(&gs).map(|(&v, &g)| h.beta2 * v + (1.0 - h.beta2) * g * g).collect();
    let upd: Vec<f32> = st
        .m
        .iter()
        .zip(&st.v)
        .map(|(&m, &v)| h.lr * (m / bc1) / ((v / bc2).sqrt() + h.eps))
        .collect();
    for (pi, u) in p.iter_mut().zip(&upd) {
        *pi -= u;
    }
    for (s, &pi) in st.swa.iter_mut().zip(p.iter()) {
        *s = h.swa_decay * *s + (1.0 - h.swa_decay) * pi;
    }
}

fn attn_tiles(cfg: &KernelConfig) -> AttnTiles {
    let d = AttnTiles::default();
    AttnTiles {
        tile_q: cfg.tile_q.unwrap_or(d.tile_q),
        tile_k: cfg.tile_k.unwrap_or(d.tile_k),
    }
}

fn ln_rows(cfg: &KernelConfig) -> usize {
    cfg.rows_per_block.unwrap_or(8)
}

/// Random attention inputs of shape `[B,H,L,D]` with a per-batch bias and gate.
pub struct AttnProblem {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub bias: Tensor,
    pub gate: Tensor,
    pub scale: f32,
}

impl AttnProblem {
    pub fn random(b: usize, h: usize, l: usize, d: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let shape = [b, h, l, d];
        Self {
            q: Tensor::randn(&shape, 1.0, &mut rng),
            k: Tensor::randn(&shape, 1.0, &mut rng),
            v: Tensor::randn(&shape, 1.0, &mut rng),
            bias: Tensor::randn(&[b, h, l, l], 1.0, &mut rng),
            gate: Tensor::randn(&shape, 1.0, &mut rng),
            scale: 1.0 / (d as f32).sqrt(),
        }
    }

    pub fn signature(&self) -> String {
        signature(&[self.q.shape()])
    }

    pub fn naive(&self) -> Result<Tensor> {
        naive_attention(&self.q, &self.k, &self.v, Some(&self.bias), Some(&self.gate), self.scale)
    }

    pub fn run(&self, cfg: &KernelConfig) -> Result<Tensor> {
        let (o, _) = attn_pair_bias_fwd(
            &self.q,
            &self.k,
            &self.v,
            Some(&self.bias),
            Some(&self.gate),
            self.scale,
            attn_tiles(cfg),
        )?;
        Ok(o)
    }
}

pub struct LnProblem {
    pub x: Tensor,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
}

impl LnProblem {
    pub fn random(rows: usize, c: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, c], 1.0, &mut rng);
        let gamma = Tensor::randn(&[c], 0.5, &mut rng).data().iter().map(|g| 1.0 + g).collect();
        let beta = Tensor::randn(&[c], 0.5, &mut rng).data().to_vec();
        Self { x, gamma, beta, eps: 1e-5 }
    }

    pub fn signature(&self) -> String {
        signature(&[self.x.shape()])
    }

    pub fn naive(&self) -> Result<Tensor> {
        naive_layernorm(&self.x, &self.gamma, &self.beta, self.eps)
    }

    pub fn run(&self, cfg: &KernelConfig) -> Result<Tensor> {
        Ok(layernorm_fwd(&self.x, &self.gamma, &self.beta, self.eps, ln_rows(cfg))?.0)
    }
}

pub fn tune_attention(tuner: &mut Autotuner, p: &AttnProblem) -> Result<TuneResult> {
    let oracle = p.naive()?;
    tuner.tune(ATTN_OP, &p.signature(), &attention_candidates(), oracle.data(), 1e-5, |cfg| {
        Ok(p.run(cfg)?.data().to_vec())
    })
}

pub fn tune_layernorm(tuner: &mut Autotuner, p: &LnProblem) -> Result<TuneResult> {
    let oracle = p.naive()?;
    tuner.tune(LN_OP, &p.signature(), &layernorm_candidates(), oracle.data(), 1e-5, |cfg| {
        Ok(p.run(cfg)?.data().to_vec())
    })
}

/// Median wall time of `reps` calls after `warmup` untimed ones.
pub fn time_median(warmup: usize, reps: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut samples)
}

/// Sizes of the full workload `W`; each op is also run at `W/2`, `W/4`
/// and `W/8` by shrinking its leading dimension.
#[derive(Clone, Copy, Debug)]
pub struct BenchSpec {
    /// `(B, H, L, D)`.
    pub attn: (usize, usize, usize, usize),
    /// `(rows, C)`.
    pub ln: (usize, usize),
    pub optim_len: usize,
    /// `(tensors, elements per tensor)`.
    pub clip: (usize, usize),
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            attn: (8, 4, 64, 16),
            ln: (8192, 128),
            optim_len: 1 << 20,
            clip: (64, 16384),
            warmup: 2,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: String,
    pub signature: String,
    pub config: KernelConfig,
    pub median_s: f64,
    pub speedup_vs_naive: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:.4}",
            r.op, r.signature, r.config, r.median_s, r.speedup_vs_naive
        );
    }
    s
}

/// Fused kernel against its unfused baseline at `W, W/2, W/4, W/8`. Tiled
/// kernels use the cached tuning for this machine when `cache` has one.
pub fn bench_kernels(spec: &BenchSpec, cache: Option<&TuneCache>) -> Result<Vec<BenchRow>> {
    let fp = super::autotune::machine_fingerprint();
    let tuned = |op: &str, sig: &str, default: KernelConfig| {
        cache
            .and_then(|c| c.lookup(op, sig, &fp))
            .map(|r| r.config.clone())
            .unwrap_or(default)
    };
    let (w, r) = (spec.warmup, spec.reps);
    let mut rows = Vec::new();
    let mut push = |op: &str, sig: String, config: KernelConfig, fused: f64, naive: f64| {
        rows.push(BenchRow {
            op: op.into(),
            signature: sig,
            config,
            median_s: fused,
            speedup_vs_naive: naive / fused,
        })
    };
    for div in [1usize, 2, 4, 8] {
        let (b, h, l, d) = spec.attn;
        let p = AttnProblem::random((b / div).max(1), h, l, d, spec.seed);
        let d0 = AttnTiles::default();
        let cfg = tuned(ATTN_OP, &p.signature(), KernelConfig::tiles(d0.tile_q, d0.tile_k));
        let fused = time_median(w, r, || {
            p.run(&cfg).expect("attention shapes are consistent");
        });
        let naive = time_median(w, r, || {
            p.naive().expect("attention shapes are consistent");
        });
        push(ATTN_OP, p.signature(), cfg, fused, naive);
    }
    for div in [1usize, 2, 4, 8] {
        let p = LnProblem::random((spec.ln.0 / div).max(1), spec.ln.1, spec.seed);
        let cfg = tuned(LN_OP, &p.signature(), KernelConfig::rows(8));
        let fused = time_median(w, r, || {
            p.run(&cfg).expect("layernorm shapes are consistent");
        });
        let naive = time_median(w, r, || {
            p.naive().expect("layernorm shapes are consistent");
        });
        push(LN_OP, p.signature(), cfg, fused, naive);
    }
    for div in [1usize, 2, 4, 8] {
        let n = (spec.optim_len / div).max(1);
        let mut params = PackedParams::new();
        params.register("w", &[n], |i| (i % 17) as f32 * 0.01)?;
        let mut grads = GradBufferSet::new(&params, 4);
        for (j, buf) in grads.buffers_mut().iter_mut().enumerate() {
            for (i, g) in buf.iter_mut().enumerate() {
                *g = ((i + j) % 13) as f32 * 1e-3 - 6e-3;
            }
        }
        let flat = grads.flat();
        let hyper = AdamSwaHyper::default();
        let mut st = OptimState::new(&params, hyper);
        let fused = time_median(w, r, || {
            fused_adam_swa_step(&mut params, &grads, &mut st, 1.0).expect("sizes agree");
        });
        let mut p2 = params.data().to_vec();
        let mut st2 = OptimState::new(&params, hyper);
        let naive = time_median(w, r, || naive_adam_swa(&mut p2, &flat, &mut st2, 1.0));
        push(ADAM_OP, signature(&[&[n]]), KernelConfig::default(), fused, naive);
    }
    for div in [1usize, 2, 4, 8] {
        let (nt, len) = spec.clip;
        let nt = (nt / div).max(1);
        let mut params = PackedParams::new();
        let mut tensors = Vec::with_capacity(nt);
        for t in 0..nt {
            params.register(format!("t{t}"), &[len], |_| 0.0)?;
            tensors.push(Tensor::from_fn(&[len], |i| ((i + t) % 7) as f32 * 0.1));
        }
        let mut grads = GradBufferSet::new(&params, 4);
        grads.copy_from_flat(&tensors.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<_>>())?;
        let fused = time_median(w, r, || {
            clip_grads_global_norm(&grads, 1.0).expect("finite gradients");
        });
        let naive = time_median(w, r, || {
            std::hint::black_box(global_norm_per_tensor(&tensors));
        });
        push(CLIP_OP, signature(&[&[nt, len]]), KernelConfig::default(), fused, naive);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_sets() {
        assert_eq!(attention_candidates().len(), 16);
        assert_eq!(layernorm_candidates().len(), 4);
    }

    #[test]
    fn naive_layernorm_normalizes() {
        let p = LnProblem::random(6, 32, 1);
        let y = naive_layernorm(&p.x, &vec![1.0; 32], &vec![0.0; 32], p.eps).unwrap();
        for r in 0..6 {
            let row = &y.data()[r * 32..(r + 1) * 32];
            let m: f32 = row.iter().sum::<f32>() / 32.0;
            assert!(m.abs() < 1e-5);
        }
    }

    #[test]
    fn tuned_attention_matches_baseline() {
        let p = AttnProblem::random(1, 2, 16, 8, 3);
        let mut t = Autotuner::new(TuneCache::in_memory());
        t.reps = 1;
        t.warmup = 0;
        let res = tune_attention(&mut t, &p).unwrap();
        let d = tensor::max_abs_diff(p.run(&res.config).unwrap().data(), p.naive().unwrap().data());
        assert!(d <= 1e-5);
    }

    #[test]
    fn bench_rows_cover_four_sizes() {
        let spec = BenchSpec {
            attn: (8, 1, 8, 4),
            ln: (64, 8),
            optim_len: 64,
            clip: (8, 16),
            warmup: 0,
            reps: 1,
            seed: 0,
        };
        let rows = bench_kernels(&spec, None).unwrap();
        assert_eq!(rows.len(), 16);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with(BENCH_HEADER));
        let e = crate::scalesim::kernel_efficiency_from_bench(&csv).unwrap();
        assert!(e.at(2) > 0.0);
    }
}

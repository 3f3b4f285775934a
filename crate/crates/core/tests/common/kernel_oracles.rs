//! Independent f64 and sequential-op references for the fused kernels.

use std::time::Instant;

use foldscale::kernels::{
    attn_pair_bias_bwd, attn_pair_bias_fwd, clip_grads_global_norm, fused_adam_swa_step, layernorm_bwd,
    layernorm_fwd, AdamSwaHyper, AttnTiles, GradBufferSet, OptimState, PackedParams,
};
use foldscale::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Materialized-logits attention in f64. `bias` is `[H,L,L]`.
pub fn attention_f64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: &[f64],
    gate: &[f64],
    (b, h, l, d): (usize, usize, usize, usize),
    scale: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; b * h * l * d];
    for bi in 0..b {
        for hi in 0..h {
            let base = (bi * h + hi) * l * d;
            for i in 0..l {
                let mut logits: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = (0..d).map(|c| q[base + i * d + c] * k[base + j * d + c]).sum();
                        dot * scale + bias[(hi * l + i) * l + j]
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in logits.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for c in 0..d {
                    let o: f64 = (0..l).map(|j| logits[j] / z * v[base + j * d + c]).sum();
                    let g = 1.0 / (1.0 + (-gate[base + i * d + c]).exp());
                    out[base + i * d + c] = o * g;
                }
            }
        }
    }
    out
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

pub struct AttnCheck {
    pub fwd_err: f64,
    pub bwd_rel_err: f64,
}

/// Forward max abs error against the f64 oracle and worst relative error of
/// all five gradients against central differences of `0.5 * |o|^2`.
pub fn check_attention(l: usize, seed: u64) -> AttnCheck {
    let (b, h, d) = (1, 2, 4);
    let dims = (b, h, l, d);
    let mut r = rng(seed);
    let shape = [b, h, l, d];
    let q = Tensor::randn(&shape, 1.0, &mut r);
    let k = Tensor::randn(&shape, 1.0, &mut r);
    let v = Tensor::randn(&shape, 1.0, &mut r);
    let bias = Tensor::randn(&[h, l, l], 1.0, &mut r);
    let gate = Tensor::randn(&shape, 1.0, &mut r);
    let scale = 1.0 / (d as f32).sqrt();
    let tiles = AttnTiles { tile_q: 8, tile_k: 8 };

    let (o, saved) = attn_pair_bias_fwd(&q, &k, &v, Some(&bias), Some(&gate), scale, tiles).unwrap();
    let mut ins = [f64s(&q), f64s(&k), f64s(&v), f64s(&bias), f64s(&gate)];
    let want = attention_f64(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4], dims, scale as f64);
    let fwd_err = o
        .data()
        .iter()
        .zip(&want)
        .map(|(&a, &w)| (a as f64 - w).abs())
        .fold(0.0, f64::max);

    let g = attn_pair_bias_bwd(&o, &q, &k, &v, Some(&bias), Some(&gate), scale, &saved).unwrap();
    let analytic = [
        f64s(&g.dq),
        f64s(&g.dk),
        f64s(&g.dv),
        f64s(g.dbias.as_ref().unwrap()),
        f64s(g.dgate.as_ref().unwrap()),
    ];
    let hstep = 1e-3;
    let mut worst: f64 = 0.0;
    for which in 0..5 {
        for idx in 0..ins[which].len() {
            let x0 = ins[which][idx];
            let loss = |x: f64, ins: &mut [Vec<f64>; 5]| {
                ins[which][idx] = x;
                let o = attention_f64(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4], dims, scale as f64);
                0.5 * o.iter().map(|v| v * v).sum::<f64>()
            };
            let fd = (loss(x0 + hstep, &mut ins) - loss(x0 - hstep, &mut ins)) / (2.0 * hstep);
            ins[which][idx] = x0;
            let a = analytic[which][idx];
            worst = worst.max((a - fd).abs() / fd.abs().max(1e-2));
        }
    }
    AttnCheck {
        fwd_err,
        bwd_rel_err: worst,
    }
}

/// Two-pass mean then variance in f64.
pub fn layernorm_f64(x: &[f32], c: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out.push((row[j] as f64 - mean) * rstd * gamma[j] as f64 + beta[j] as f64);
        }
    }
    out
}

pub struct LnCheck {
    pub fwd_err: f64,
    pub param_grads_exact: bool,
}

/// Forward error relative to `max(1, |y|)` and whether dgamma/dbeta equal
/// block-ordered sums (row order within a block, then block order).
pub fn check_layernorm(c: usize, seed: u64) -> LnCheck {
    let (rows, rpb) = (64, 8);
    let mut r = rng(seed);
    let x = Tensor::randn(&[rows, c], 1.0, &mut r);
    let gamma: Vec<f32> = (0..c).map(|_| 1.0 + r.gen_range(-0.5..0.5)).collect();
    let beta: Vec<f32> = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    let (y, saved) = layernorm_fwd(&x, &gamma, &beta, 1e-5, rpb).unwrap();
    let want = layernorm_f64(x.data(), c, &gamma, &beta, 1e-5);
    let fwd_err = y
        .data()
        .iter()
        .zip(&want)
        .map(|(&a, &w)| (a as f64 - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max);

    let dy = Tensor::randn(&[rows, c], 1.0, &mut r);
    let g = layernorm_bwd(&dy, &x, &saved, &gamma, rpb).unwrap();
    let (xd, dyd) = (x.data(), dy.data());
    let (mean, rstd) = (saved.mean.data(), saved.rstd.data());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for blk in 0..rows.div_ceil(rpb) {
        let mut pg = vec![0.0f32; c];
        let mut pb = vec![0.0f32; c];
        for row in blk * rpb..((blk + 1) * rpb).min(rows) {
            for j in 0..c {
                let xhat = (xd[row * c + j] - mean[row]) * rstd[row];
                pg[j] += dyd[row * c + j] * xhat;
                pb[j] += dyd[row * c + j];
            }
        }
        for j in 0..c {
            dgamma[j] += pg[j];
            dbeta[j] += pb[j];
        }
    }
    LnCheck {
        fwd_err,
        param_grads_exact: g.dgamma == dgamma && g.dbeta == dbeta,
    }
}

/// Five separate passes: scale, m-update, v-update, adam-apply, swa-ema.
pub struct FiveOpAdam {
    pub p: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub swa: Vec<f32>,
    pub t: i32,
    pub h: AdamSwaHyper,
}

impl FiveOpAdam {
    pub fn new(p: &[f32], h: AdamSwaHyper) -> Self {
        Self {
            p: p.to_vec(),
            m: vec![0.0; p.len()],
            v: vec![0.0; p.len()],
            swa: p.to_vec(),
            t: 0,
            h,
        }
    }

    pub fn step(&mut self, g: &[f32], scale: f32) {
        let h = self.h;
        self.t += 1;
        let bc1 = (1.0 - (h.beta1 as f64).powi(self.t)) as f32;
        let bc2 = (1.0 - (h.beta2 as f64).powi(self.t)) as f32;
        let gs: Vec<f32> = g.iter().map(|&x| x * scale).collect();
        for (m, &g) in self.m.iter_mut().zip(&gs) {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        }
        for (v, &g) in self.v.iter_mut().zip(&gs) {
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        }
        for i in 0..self.p.len() {
            self.p[i] -= h.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + h.eps);
        }
        for (s, &p) in self.swa.iter_mut().zip(&self.p) {
            *s = h.swa_decay * *s + (1.0 - h.swa_decay) * p;
        }
    }
}

fn rel(a: f32, b: f32) -> f64 {
    let d = (a as f64 - b as f64).abs();
    if d == 0.0 {
        0.0
    } else {
        d / (b as f64).abs().max(f32::MIN_POSITIVE as f64)
    }
}

/// Worst relative param/swa deviation over `steps` random steps, with a
/// random clip scale each step.
pub fn check_optimizer(steps: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut params = PackedParams::new();
    for (i, shape) in [[7usize, 5], [64, 3], [1, 1], [300, 2]].iter().enumerate() {
        let vals: Vec<f32> = (0..shape[0] * shape[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
        params.register(format!("w{i}"), shape, |j| vals[j]).unwrap();
    }
    let hyper = AdamSwaHyper {
        lr: 1e-2,
        swa_decay: 0.9,
        ..AdamSwaHyper::default()
    };
    let mut st = OptimState::new(&params, hyper);
    let mut oracle = FiveOpAdam::new(params.data(), hyper);
    let mut grads = GradBufferSet::new(&params, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let g: Vec<f32> = (0..params.len()).map(|_| r.gen_range(-2.0..2.0)).collect();
        grads.copy_from_flat(&g).unwrap();
        let scale: f32 = r.gen_range(0.1..=1.0);
        fused_adam_swa_step(&mut params, &grads, &mut st, scale).unwrap();
        oracle.step(&g, scale);
        for (a, b) in params.data().iter().zip(&oracle.p) {
            worst = worst.max(rel(*a, *b));
        }
        for (a, b) in st.swa.iter().zip(&oracle.swa) {
            worst = worst.max(rel(*a, *b));
        }
    }
    worst
}

/// Clip factor for a single gradient buffer `[3, 4]` at `max_norm = 1`.
pub fn clip_three_four() -> f32 {
    let mut params = PackedParams::new();
    params.register("g", &[2], |_| 0.0).unwrap();
    let mut grads = GradBufferSet::new(&params, 1);
    grads.copy_from_flat(&[3.0, 4.0]).unwrap();
    clip_grads_global_norm(&grads, 1.0).unwrap()
}

/// Median wall time of `f` over `reps` calls after one warmup.
pub fn median_time(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut s: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    s.sort_by(|a, b| a.total_cmp(b));
    s[s.len() / 2]
}

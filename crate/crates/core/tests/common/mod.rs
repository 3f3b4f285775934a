//! Shared test oracles: a naive f64 re-implementation of the model that
//! materialises every intermediate and shares no code with the library.

#![allow(dead_code)]

pub mod kernel_oracles;

use std::collections::HashMap;

use foldscale::evoformer::{Inputs, ModelConfig};
use foldscale::kernels::PackedParams;
use foldscale::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            d: vec![0.0; shape.iter().product()],
        }
    }

    fn last(&self) -> usize {
        *self.shape.last().unwrap()
    }

    fn add(&mut self, o: &Arr) {
        assert_eq!(self.shape, o.shape);
        for (a, b) in self.d.iter_mut().zip(&o.d) {
            *a += b;
        }
    }
}

pub struct RefParams {
    map: HashMap<String, Vec<f64>>,
}

impl RefParams {
    pub fn new(p: &PackedParams) -> Self {
        let map = p
            .segments()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    p.data()[s.offset..s.offset + s.len].iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        Self { map }
    }

    /// f64 copy of `p` with element `flat_index` of the packed buffer moved
    /// by `delta`.
    pub fn perturbed(p: &PackedParams, flat_index: usize, delta: f64) -> Self {
        let mut r = Self::new(p);
        let seg = p
            .segments()
            .iter()
            .find(|s| flat_index >= s.offset && flat_index < s.offset + s.len)
            .unwrap();
        r.map.get_mut(&seg.name).unwrap()[flat_index - seg.offset] += delta;
        r
    }

    fn get(&self, name: &str) -> &[f64] {
        self.map.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }
}

fn ln(x: &Arr, g: &[f64], b: &[f64], eps: f64) -> Arr {
    let c = x.last();
    let mut out = x.clone();
    for (row, orow) in x.d.chunks(c).zip(out.d.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
    }
    out
}

fn linear(x: &Arr, w: &[f64], b: Option<&[f64]>, cout: usize) -> Arr {
    let cin = x.last();
    let rows = x.d.len() / cin;
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = cout;
    let mut d = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                acc += x.d[r * cin + i] * w[i * cout + o];
            }
            d[r * cout + o] = acc;
        }
    }
    Arr { shape, d }
}

fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `x: [B, L, c]`, attention along L, heads split `h * D + d`.
fn gated_attention(cfg: &ModelConfig, p: &RefParams, name: &str, x: &Arr, bias: Option<&Arr>) -> Arr {
    let (bsz, l, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim);
    let hd = h * dh;
    let xn = ln(x, p.get(&format!("{name}.ln.gamma")), p.get(&format!("{name}.ln.beta")), cfg.ln_eps as f64);
    let w = p.get(&format!("{name}.w_qkvg"));
    let proj: Vec<Arr> = (0..4)
        .map(|i| linear(&xn, &w[i * c * hd..(i + 1) * c * hd], None, hd))
        .collect();
    let (q, k, v, g) = (&proj[0], &proj[1], &proj[2], &proj[3]);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = Arr::zeros(&[bsz, l, hd]);
    for b in 0..bsz {
        for hh in 0..h {
            for i in 0..l {
                let at = |t: &Arr, pos: usize, d: usize| t.d[(b * l + pos) * hd + hh * dh + d];
                let mut logits: Vec<f64> = (0..l)
                    .map(|j| {
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += at(q, i, d) * at(k, j, d);
                        }
                        s * scale + bias.map_or(0.0, |bb| bb.d[(hh * l + i) * l + j])
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in logits.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..l {
                        acc += logits[j] / z * at(v, j, d);
                    }
                    o.d[(b * l + i) * hd + hh * dh + d] = sigmoid(at(g, i, d)) * acc;
                }
            }
        }
    }
    linear(&o, p.get(&format!("{name}.w_o")), Some(p.get(&format!("{name}.b_o"))), c)
}

/// `[H, R, R]` bias from `pair: [R, R, c_z]`.
fn pair_bias(cfg: &ModelConfig, p: &RefParams, name: &str, pair: &Arr) -> Arr {
    let r = pair.shape[0];
    let zn = ln(pair, p.get(&format!("{name}.ln.gamma")), p.get(&format!("{name}.ln.beta")), cfg.ln_eps as f64);
    let b = linear(&zn, p.get(&format!("{name}.w")), None, cfg.heads);
    let mut out = Arr::zeros(&[cfg.heads, r, r]);
    for i in 0..r {
        for j in 0..r {
            for h in 0..cfg.heads {
                out.d[(h * r + i) * r + j] = b.d[(i * r + j) * cfg.heads + h];
            }
        }
    }
    out
}

fn transition(cfg: &ModelConfig, p: &RefParams, name: &str, x: &Arr) -> Arr {
    let c = x.last();
    let f = cfg.transition_factor * c;
    let xn = ln(x, p.get(&format!("{name}.ln.gamma")), p.get(&format!("{name}.ln.beta")), cfg.ln_eps as f64);
    let mut hmid = linear(&xn, p.get(&format!("{name}.w1")), Some(p.get(&format!("{name}.b1"))), f);
    hmid.d.iter_mut().for_each(|v| *v = gelu(*v));
    linear(&hmid, p.get(&format!("{name}.w2")), Some(p.get(&format!("{name}.b2"))), c)
}

fn transpose01(x: &Arr) -> Arr {
    let (a, b, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Arr::zeros(&[b, a, c]);
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                out.d[(j * a + i) * c + k] = x.d[(i * b + j) * c + k];
            }
        }
    }
    out
}

fn outer_product_mean(cfg: &ModelConfig, p: &RefParams, name: &str, msa: &Arr) -> Arr {
    let (s, r, _) = (msa.shape[0], msa.shape[1], msa.shape[2]);
    let co = cfg.c_opm;
    let xn = ln(msa, p.get(&format!("{name}.ln.gamma")), p.get(&format!("{name}.ln.beta")), cfg.ln_eps as f64);
    let a = linear(&xn, p.get(&format!("{name}.wa")), Some(p.get(&format!("{name}.ba"))), co);
    let b = linear(&xn, p.get(&format!("{name}.wb")), Some(p.get(&format!("{name}.bb"))), co);
    let mut o = Arr::zeros(&[r, r, co * co]);
    for i in 0..r {
        for j in 0..r {
            for pp in 0..co {
                for qq in 0..co {
                    let mut acc = 0.0;
                    for ss in 0..s {
                        acc += a.d[(ss * r + i) * co + pp] * b.d[(ss * r + j) * co + qq];
                    }
                    o.d[(i * r + j) * co * co + pp * co + qq] = acc / s as f64;
                }
            }
        }
    }
    linear(&o, p.get(&format!("{name}.wo")), Some(p.get(&format!("{name}.bo"))), cfg.c_z)
}

pub fn block(cfg: &ModelConfig, p: &RefParams, i: usize, msa: &Arr, pair: &Arr) -> (Arr, Arr) {
    let n = |s: &str| format!("block{i}.{s}");
    let mut msa = msa.clone();
    let mut pair = pair.clone();
    let bias = pair_bias(cfg, p, &n("row_attn.pair_bias"), &pair);
    let d = gated_attention(cfg, p, &n("row_attn"), &msa, Some(&bias));
    msa.add(&d);
    let d = transpose01(&gated_attention(cfg, p, &n("col_attn"), &transpose01(&msa), None));
    msa.add(&d);
    let d = transition(cfg, p, &n("msa_transition"), &msa);
    msa.add(&d);
    let d = outer_product_mean(cfg, p, &n("outer_product_mean"), &msa);
    pair.add(&d);
    let bias = pair_bias(cfg, p, &n("tri_attn_start.pair_bias"), &pair);
    let d = gated_attention(cfg, p, &n("tri_attn_start"), &pair, Some(&bias));
    pair.add(&d);
    let pt = transpose01(&pair);
    let bias = pair_bias(cfg, p, &n("tri_attn_end.pair_bias"), &pt);
    let d = transpose01(&gated_attention(cfg, p, &n("tri_attn_end"), &pt, Some(&bias)));
    pair.add(&d);
    let d = transition(cfg, p, &n("pair_transition"), &pair);
    pair.add(&d);
    (msa, pair)
}

fn stack(cfg: &ModelConfig, p: &RefParams, msa: Arr, pair: Arr) -> (Arr, Arr) {
    let (mut m, mut z) = (msa, pair);
    for i in 0..cfg.n_blocks {
        let (a, b) = block(cfg, p, i, &m, &z);
        m = a;
        z = b;
    }
    (m, z)
}

fn channel_means(x: &Arr) -> Vec<f64> {
    let c = x.last();
    let n = (x.d.len() / c) as f64;
    let mut s = vec![0.0; c];
    for row in x.d.chunks(c) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s.iter().map(|v| v / n).collect()
}

/// Pooled features after `n_recycle` passes.
pub fn features(cfg: &ModelConfig, p: &RefParams, inputs: &Inputs, n_recycle: usize) -> Vec<f64> {
    features_split(cfg, p, p, inputs, n_recycle)
}

/// As [`features`], with the earlier passes run under `p_prev` so that a
/// perturbation of `p_last` only reaches the final pass.
pub fn features_split(
    cfg: &ModelConfig,
    p_prev: &RefParams,
    p_last: &RefParams,
    inputs: &Inputs,
    n_recycle: usize,
) -> Vec<f64> {
    let msa0 = Arr::from_tensor(&inputs.msa);
    let pair0 = Arr::from_tensor(&inputs.pair);
    let eps = cfg.ln_eps as f64;
    let mut prev: Option<(Arr, Arr)> = None;
    for it in 0..n_recycle {
        let p = if it + 1 == n_recycle { p_last } else { p_prev };
        let mut msa = msa0.clone();
        let mut pair = pair0.clone();
        if let Some((pm, pz)) = &prev {
            let row = pm.shape[1] * pm.shape[2];
            let row0 = Arr {
                shape: vec![1, pm.shape[1], pm.shape[2]],
                d: pm.d[..row].to_vec(),
            };
            let e = ln(&row0, p.get("recycle.msa.gamma"), p.get("recycle.msa.beta"), eps);
            for (m, v) in msa.d[..row].iter_mut().zip(&e.d) {
                *m += v;
            }
            pair.add(&ln(pz, p.get("recycle.pair.gamma"), p.get("recycle.pair.beta"), eps));
        }
        prev = Some(stack(cfg, p, msa, pair));
    }
    let (m, z) = prev.unwrap();
    let mut f = channel_means(&m);
    f.extend(channel_means(&z));
    f
}

pub fn mse(f: &[f64], t: &[f32]) -> f64 {
    f.iter().zip(t).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / f.len() as f64
}

/// Largest relative deviation, relative to `max(|b_i|, floor)`.
pub fn max_rel(a: &[f32], b: &[f32], floor: f32) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f32::max)
}

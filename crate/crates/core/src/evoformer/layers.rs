//! Layer building blocks with hand-written backward passes. Every kernel is
//! launched through [`Exec`]; cross-rank data movement goes through
//! [`Collectives`].

use super::config::{BiasMode, ModelConfig};
use super::params::{GaW, OpmW, PbW, TransW};
use crate::dap::Collectives;
use crate::error::{Error, Result};
use crate::kernels::{
    attn_pair_bias_bwd, attn_pair_bias_fwd, layernorm_bwd, layernorm_fwd, qkvg_project_stacked,
    AttnSaved, AttnTiles, GradBufferSet, KernelConfig, LnSaved, PackedParams, SegId,
};
use crate::runtime::{Exec, OpCategory};
use crate::tensor::ops::{gelu_grad_scalar, gelu_scalar, gemm_into, gemm_nt_into, gemm_tn_into};
use crate::tensor::{self, record_dispatch, Precision, Tensor};

const NO_CFG: KernelConfig = KernelConfig {
    tile_q: None,
    tile_k: None,
    rows_per_block: None,
    split: None,
};
pub(crate) const LN_DEFAULT: KernelConfig = KernelConfig {
    tile_q: None,
    tile_k: None,
    rows_per_block: Some(8),
    split: None,
};

/// Everything a layer needs besides its inputs.
pub struct Env<'a, C: Collectives + ?Sized> {
    pub exec: &'a mut Exec,
    pub comm: &'a C,
    pub params: &'a PackedParams,
    pub cfg: &'a ModelConfig,
}

fn last_dim(x: &Tensor) -> usize {
    *x.shape().last().unwrap_or(&1)
}

fn rows2(x: &Tensor) -> Result<Tensor> {
    let c = last_dim(x);
    x.clone().reshape(&[x.numel() / c.max(1), c])
}

fn finish(t: Tensor, p: Precision) -> Tensor {
    if p == Precision::Bf16E {
        t.with_precision(p)
    } else {
        t
    }
}

pub(crate) fn linear<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    x: &Tensor,
    w: SegId,
    b: Option<SegId>,
) -> Result<Tensor> {
    let wshape = env.params.segment(w).shape.clone();
    let (cin, cout) = (wshape[0], wshape[1]);
    if last_dim(x) != cin {
        return Err(Error::Dimension {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: wshape,
        });
    }
    let rows = x.numel() / cin;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cout;
    let prec = env.exec.precision();
    let params = env.params;
    env.exec
        .launch("linear", OpCategory::MathBound, &[x.shape(), &wshape], &NO_CFG, |_| {
            let mut out = vec![0.0f32; rows * cout];
            gemm_into(x.data(), params.get(w), rows, cin, cout, &mut out);
            if let Some(b) = b {
                let bias = params.get(b);
                for row in out.chunks_mut(cout) {
                    for (o, bv) in row.iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
            }
            record_dispatch();
            Ok(finish(Tensor::new(&shape, out)?, prec))
        })
}

/// Accumulates weight and bias gradients and returns `dx`.
pub(crate) fn linear_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    dy: &Tensor,
    x: &Tensor,
    w: SegId,
    b: Option<SegId>,
) -> Result<Tensor> {
    let wshape = env.params.segment(w).shape.clone();
    let (cin, cout) = (wshape[0], wshape[1]);
    let rows = x.numel() / cin;
    let params = env.params;
    env.exec
        .launch("linear_bwd_weight", OpCategory::MathBound, &[x.shape(), dy.shape()], &NO_CFG, |_| {
            let mut dw = vec![0.0f32; cin * cout];
            gemm_tn_into(x.data(), dy.data(), rows, cin, cout, &mut dw);
            grads.accumulate(w, &dw);
            record_dispatch();
            Ok(())
        })?;
    if let Some(b) = b {
        env.exec
            .launch("bias_grad", OpCategory::MemoryBound, &[dy.shape()], &NO_CFG, |_| {
                let mut db = vec![0.0f32; cout];
                for row in dy.data().chunks(cout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads.accumulate(b, &db);
                record_dispatch();
                Ok(())
            })?;
    }
    let mut shape = dy.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cin;
    env.exec
        .launch("linear_bwd_input", OpCategory::MathBound, &[dy.shape(), &wshape], &NO_CFG, |_| {
            let mut dx = vec![0.0f32; rows * cin];
            gemm_nt_into(dy.data(), params.get(w), rows, cout, cin, &mut dx);
            record_dispatch();
            Tensor::new(&shape, dx)
        })
}

pub(crate) fn ln<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    x: &Tensor,
    g: SegId,
    b: SegId,
) -> Result<(Tensor, LnSaved)> {
    let prec = env.exec.precision();
    let eps = env.cfg.ln_eps;
    let params = env.params;
    env.exec
        .launch("layernorm_fwd", OpCategory::MemoryBound, &[x.shape()], &LN_DEFAULT, |cfg| {
            let (y, saved) =
                layernorm_fwd(x, params.get(g), params.get(b), eps, cfg.rows_per_block.unwrap_or(8))?;
            Ok((finish(y, prec), saved))
        })
}

pub(crate) fn ln_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    dy: &Tensor,
    x: &Tensor,
    saved: &LnSaved,
    g: SegId,
    b: SegId,
) -> Result<Tensor> {
    let params = env.params;
    env.exec
        .launch("layernorm_bwd", OpCategory::MemoryBound, &[x.shape()], &LN_DEFAULT, |cfg| {
            let r = layernorm_bwd(dy, x, saved, params.get(g), cfg.rows_per_block.unwrap_or(8))?;
            grads.accumulate(g, &r.dgamma);
            grads.accumulate(b, &r.dbeta);
            Ok(r.dx)
        })
}

pub(crate) fn permute<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    x: &Tensor,
    perm: &[usize],
) -> Result<Tensor> {
    env.exec
        .launch("permute", OpCategory::MemoryOp, &[x.shape()], &NO_CFG, |_| tensor::permute(x, perm))
}

/// `x += d` as a launched kernel.
pub(crate) fn residual<C: Collectives + ?Sized>(env: &mut Env<'_, C>, x: &mut Tensor, d: &Tensor) -> Result<()> {
    let shape = x.shape().to_vec();
    env.exec
        .launch("residual_add", OpCategory::MemoryBound, &[&shape], &NO_CFG, |_| {
            record_dispatch();
            x.add_assign(d)
        })
}

// ---------------------------------------------------------------- attention

pub struct GaCache {
    x: Tensor,
    xn2: Tensor,
    ln: LnSaved,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    g: Tensor,
    o2: Tensor,
    attn: AttnSaved,
}

impl GaCache {
    pub fn bytes(&self) -> usize {
        [&self.x, &self.xn2, &self.q, &self.k, &self.v, &self.g, &self.o2]
            .iter()
            .map(|t| t.size_bytes())
            .sum::<usize>()
            + self.ln.mean.size_bytes()
            + self.ln.rstd.size_bytes()
            + self.attn.row_max.size_bytes()
            + self.attn.row_sumexp.size_bytes()
    }
}

fn dims3(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape(op, format!("expected rank 3, got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.dim(2)))
}

/// Gated multi-head self-attention over axis 1 of `x: [B, L, c]`, with an
/// optional `[H, L, L]` bias shared across B. Returns the residual delta.
pub(crate) fn gated_attention<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    w: &GaW,
    x: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, GaCache)> {
    let (bsz, l, c) = dims3(x, "gated_attention")?;
    let (h, d) = (env.cfg.heads, env.cfg.head_dim);
    let (xn, ln_saved) = ln(env, x, w.ln_g, w.ln_b)?;
    let xn2 = xn.reshape(&[bsz * l, c])?;
    let wq = env.params.tensor(w.w_qkvg);
    let prec = env.exec.precision();
    let qkvg = env.exec.launch(
        "qkvg_project",
        OpCategory::MathBound,
        &[xn2.shape(), wq.shape()],
        &NO_CFG,
        |_| qkvg_project_stacked(&xn2, &wq, prec),
    )?;
    let mut heads = Vec::with_capacity(4);
    for i in 0..4 {
        let part = tensor::narrow(&qkvg, 0, i, 1)?.reshape(&[bsz, l, h, d])?;
        heads.push(permute(env, &part, &[0, 2, 1, 3])?);
    }
    let g = heads.pop().expect("four parts");
    let v = heads.pop().expect("four parts");
    let k = heads.pop().expect("four parts");
    let q = heads.pop().expect("four parts");
    let scale = 1.0 / (d as f32).sqrt();
    let tiles = env.cfg.tiles;
    let default = KernelConfig::tiles(tiles.tile_q, tiles.tile_k);
    let (o, attn) = env.exec.launch(
        "attention_fwd",
        OpCategory::MathBound,
        &[q.shape()],
        &default,
        |cfg| {
            let t = AttnTiles {
                tile_q: cfg.tile_q.unwrap_or(tiles.tile_q),
                tile_k: cfg.tile_k.unwrap_or(tiles.tile_k),
            };
            let (o, s) = attn_pair_bias_fwd(&q, &k, &v, bias, Some(&g), scale, t)?;
            Ok((finish(o, prec), s))
        },
    )?;
    let o2 = permute(env, &o, &[0, 2, 1, 3])?.reshape(&[bsz * l, h * d])?;
    let y = linear(env, &o2, w.w_o, Some(w.b_o))?.reshape(&[bsz, l, c])?;
    Ok((
        y,
        GaCache {
            x: x.clone(),
            xn2,
            ln: ln_saved,
            q,
            k,
            v,
            g,
            o2,
            attn,
        },
    ))
}

/// Returns `(dx, dbias)`.
pub(crate) fn gated_attention_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    w: &GaW,
    cache: &GaCache,
    dy: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>)> {
    let (bsz, l, c) = dims3(&cache.x, "gated_attention_bwd")?;
    let (h, d) = (env.cfg.heads, env.cfg.head_dim);
    let hd = h * d;
    let dy2 = dy.clone().reshape(&[bsz * l, c])?;
    let do2 = linear_bwd(env, grads, &dy2, &cache.o2, w.w_o, Some(w.b_o))?;
    let dout = permute(env, &do2.reshape(&[bsz, l, h, d])?, &[0, 2, 1, 3])?;
    let scale = 1.0 / (d as f32).sqrt();
    let ag = env.exec.launch(
        "attention_bwd",
        OpCategory::MathBound,
        &[cache.q.shape()],
        &NO_CFG,
        |_| {
            attn_pair_bias_bwd(
                &dout,
                &cache.q,
                &cache.k,
                &cache.v,
                bias,
                Some(&cache.g),
                scale,
                &cache.attn,
            )
        },
    )?;
    let dg = ag.dgate.as_ref().expect("gate supplied");
    let mut flat = Vec::with_capacity(4);
    for t in [&ag.dq, &ag.dk, &ag.dv, dg] {
        flat.push(permute(env, t, &[0, 2, 1, 3])?.reshape(&[bsz * l, hd])?);
    }
    let params = env.params;
    let rows = bsz * l;
    let xn2 = &cache.xn2;
    let dxn = env.exec.launch(
        "qkvg_project_bwd",
        OpCategory::MathBound,
        &[xn2.shape(), &[4, c, hd]],
        &NO_CFG,
        |_| {
            let wall = params.get(w.w_qkvg);
            let mut dw = vec![0.0f32; 4 * c * hd];
            let mut dx = vec![0.0f32; rows * c];
            let mut tmp = vec![0.0f32; rows * c];
            for (i, di) in flat.iter().enumerate() {
                gemm_tn_into(xn2.data(), di.data(), rows, c, hd, &mut dw[i * c * hd..(i + 1) * c * hd]);
                gemm_nt_into(di.data(), &wall[i * c * hd..(i + 1) * c * hd], rows, hd, c, &mut tmp);
                for (a, t) in dx.iter_mut().zip(&tmp) {
                    *a += t;
                }
            }
            grads.accumulate(w.w_qkvg, &dw);
            record_dispatch();
            Tensor::new(&[bsz, l, c], dx)
        },
    )?;
    let dx = ln_bwd(env, grads, &dxn, &cache.x, &cache.ln, w.ln_g, w.ln_b)?;
    Ok((dx, ag.dbias))
}

// ---------------------------------------------------------------- pair bias

pub struct PbCache {
    /// Pair rows the projection ran on (local rows, or the gathered pair).
    x: Tensor,
    xn: Tensor,
    ln: LnSaved,
}

impl PbCache {
    pub fn bytes(&self) -> usize {
        self.x.size_bytes() + self.xn.size_bytes() + self.ln.mean.size_bytes() + self.ln.rstd.size_bytes()
    }
}

/// `[H, R, R]` attention bias from a row-sharded pair `[R_l, R, c_z]`.
pub(crate) fn pair_bias<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    w: &PbW,
    pair: &Tensor,
) -> Result<(Tensor, PbCache)> {
    let (x, gather_after) = match env.cfg.bias_mode {
        BiasMode::Gather => (pair.clone(), true),
        BiasMode::Recompute => (env.comm.all_gather(pair, 0)?, false),
    };
    let (xn, ln_saved) = ln(env, &x, w.ln_g, w.ln_b)?;
    let b = linear(env, &xn, w.w, None)?;
    let full = if gather_after { env.comm.all_gather(&b, 0)? } else { b };
    let bias = permute(env, &full, &[2, 0, 1])?;
    Ok((bias, PbCache { x, xn, ln: ln_saved }))
}

/// Gradient wrt the local pair rows.
pub(crate) fn pair_bias_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    w: &PbW,
    cache: &PbCache,
    dbias: &Tensor,
) -> Result<Tensor> {
    let d = permute(env, dbias, &[1, 2, 0])?;
    match env.cfg.bias_mode {
        BiasMode::Gather => {
            let d_loc = env.comm.reduce_scatter(&d, 0)?;
            let dxn = linear_bwd(env, grads, &d_loc, &cache.xn, w.w, None)?;
            ln_bwd(env, grads, &dxn, &cache.x, &cache.ln, w.ln_g, w.ln_b)
        }
        BiasMode::Recompute => {
            let dxn = linear_bwd(env, grads, &d, &cache.xn, w.w, None)?;
            let dfull = ln_bwd(env, grads, &dxn, &cache.x, &cache.ln, w.ln_g, w.ln_b)?;
            env.comm.reduce_scatter(&dfull, 0)
        }
    }
}

// --------------------------------------------------------------- transition

pub struct TransCache {
    x: Tensor,
    xn2: Tensor,
    ln: LnSaved,
    h: Tensor,
    a: Tensor,
}

impl TransCache {
    pub fn bytes(&self) -> usize {
        [&self.x, &self.xn2, &self.h, &self.a]
            .iter()
            .map(|t| t.size_bytes())
            .sum::<usize>()
            + self.ln.mean.size_bytes()
            + self.ln.rstd.size_bytes()
    }
}

/// LN, expand by the transition factor, GELU, project back.
pub(crate) fn transition<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    w: &TransW,
    x: &Tensor,
) -> Result<(Tensor, TransCache)> {
    let (xn, ln_saved) = ln(env, x, w.ln_g, w.ln_b)?;
    let xn2 = rows2(&xn)?;
    let h = linear(env, &xn2, w.w1, Some(w.b1))?;
    let prec = env.exec.precision();
    let a = env
        .exec
        .launch("gelu", OpCategory::MemoryBound, &[h.shape()], &NO_CFG, |_| {
            record_dispatch();
            let data = h.data().iter().map(|&v| gelu_scalar(v)).collect();
            Ok(finish(Tensor::new(h.shape(), data)?, prec))
        })?;
    let y = linear(env, &a, w.w2, Some(w.b2))?.reshape(x.shape())?;
    Ok((
        y,
        TransCache {
            x: x.clone(),
            xn2,
            ln: ln_saved,
            h,
            a,
        },
    ))
}

pub(crate) fn transition_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    w: &TransW,
    cache: &TransCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let dy2 = rows2(dy)?;
    let da = linear_bwd(env, grads, &dy2, &cache.a, w.w2, Some(w.b2))?;
    let h = &cache.h;
    let dh = env
        .exec
        .launch("gelu_bwd", OpCategory::MemoryBound, &[h.shape()], &NO_CFG, |_| {
            record_dispatch();
            let data = da
                .data()
                .iter()
                .zip(h.data())
                .map(|(&g, &v)| g * gelu_grad_scalar(v))
                .collect();
            Tensor::new(h.shape(), data)
        })?;
    let dxn = linear_bwd(env, grads, &dh, &cache.xn2, w.w1, Some(w.b1))?.reshape(cache.x.shape())?;
    ln_bwd(env, grads, &dxn, &cache.x, &cache.ln, w.ln_g, w.ln_b)
}

// ------------------------------------------------------- outer product mean

pub struct OpmCache {
    x: Tensor,
    xn2: Tensor,
    ln: LnSaved,
    /// `[R_l * c_opm, S]`
    a: Tensor,
    /// `[S, R * c_opm]`
    b: Tensor,
    /// `[R_l * R, c_opm^2]`
    o2: Tensor,
}

impl OpmCache {
    pub fn bytes(&self) -> usize {
        [&self.x, &self.xn2, &self.a, &self.b, &self.o2]
            .iter()
            .map(|t| t.size_bytes())
            .sum::<usize>()
            + self.ln.mean.size_bytes()
            + self.ln.rstd.size_bytes()
    }
}

/// `msa: [S, R_l, c_m]` sharded along residues; returns the `[R_l, R, c_z]`
/// pair delta for the local rows.
pub(crate) fn outer_product_mean<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    w: &OpmW,
    msa: &Tensor,
) -> Result<(Tensor, OpmCache)> {
    let (s, rl, _) = dims3(msa, "outer_product_mean")?;
    let co = env.cfg.c_opm;
    let (xn, ln_saved) = ln(env, msa, w.ln_g, w.ln_b)?;
    let xn2 = rows2(&xn)?;
    let a = linear(env, &xn2, w.wa, Some(w.ba))?.reshape(&[s, rl, co])?;
    let b = linear(env, &xn2, w.wb, Some(w.bb))?.reshape(&[s, rl, co])?;
    let b_full = env.comm.all_gather(&b, 1)?;
    let r = b_full.dim(1);
    let a_t = permute(env, &a, &[1, 2, 0])?.reshape(&[rl * co, s])?;
    let b_m = b_full.reshape(&[s, r * co])?;
    let prec = env.exec.precision();
    let inv_s = 1.0 / s as f32;
    let o = env.exec.launch(
        "outer_product",
        OpCategory::MathBound,
        &[a_t.shape(), b_m.shape()],
        &NO_CFG,
        |_| {
            let mut out = vec![0.0f32; rl * co * r * co];
            gemm_into(a_t.data(), b_m.data(), rl * co, s, r * co, &mut out);
            for v in &mut out {
                *v *= inv_s;
            }
            record_dispatch();
            Ok(finish(Tensor::new(&[rl, co, r, co], out)?, prec))
        },
    )?;
    let o2 = permute(env, &o, &[0, 2, 1, 3])?.reshape(&[rl * r, co * co])?;
    let y = linear(env, &o2, w.wo, Some(w.bo))?.reshape(&[rl, r, env.cfg.c_z])?;
    Ok((
        y,
        OpmCache {
            x: msa.clone(),
            xn2,
            ln: ln_saved,
            a: a_t,
            b: b_m,
            o2,
        },
    ))
}

pub(crate) fn outer_product_mean_bwd<C: Collectives + ?Sized>(
    env: &mut Env<'_, C>,
    grads: &mut GradBufferSet,
    w: &OpmW,
    cache: &OpmCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let (s, rl, _) = dims3(&cache.x, "outer_product_mean_bwd")?;
    let co = env.cfg.c_opm;
    let r = cache.b.dim(1) / co;
    let dy2 = rows2(dy)?;
    let do2 = linear_bwd(env, grads, &dy2, &cache.o2, w.wo, Some(w.bo))?;
    let dout = permute(env, &do2.reshape(&[rl, r, co, co])?, &[0, 2, 1, 3])?;
    let inv_s = 1.0 / s as f32;
    let (a_t, b_m) = (&cache.a, &cache.b);
    let (da_t, db_m) = env.exec.launch(
        "outer_product_bwd",
        OpCategory::MathBound,
        &[a_t.shape(), b_m.shape()],
        &NO_CFG,
        |_| {
            let d: Vec<f32> = dout.data().iter().map(|v| v * inv_s).collect();
            let mut da = vec![0.0f32; rl * co * s];
            gemm_nt_into(&d, b_m.data(), rl * co, r * co, s, &mut da);
            let mut db = vec![0.0f32; s * r * co];
            gemm_tn_into(a_t.data(), &d, rl * co, s, r * co, &mut db);
            record_dispatch();
            Ok((Tensor::new(&[rl, co, s], da)?, Tensor::new(&[s, r, co], db)?))
        },
    )?;
    let da = permute(env, &da_t, &[2, 0, 1])?.reshape(&[s * rl, co])?;
    let db = env.comm.reduce_scatter(&db_m, 1)?.reshape(&[s * rl, co])?;
    let mut dxn = linear_bwd(env, grads, &da, &cache.xn2, w.wa, Some(w.ba))?;
    let dxn_b = linear_bwd(env, grads, &db, &cache.xn2, w.wb, Some(w.bb))?;
    residual(env, &mut dxn, &dxn_b)?;
    let dxn = dxn.reshape(cache.x.shape())?;
    ln_bwd(env, grads, &dxn, &cache.x, &cache.ln, w.ln_g, w.ln_b)
}

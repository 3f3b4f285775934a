//! Gated multi-head attention with an additive pair bias.
//!
//! `o = sigmoid(g) * (softmax(q k^T * scale + bias) v)`, evaluated tile by tile
//! with a streaming softmax so the `L x L` logits are never materialised. The
//! backward pass recomputes probabilities from the saved per-row max and
//! sum-of-exponentials.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{record_dispatch, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttnTiles {
    pub tile_q: usize,
    pub tile_k: usize,
}

impl Default for AttnTiles {
    fn default() -> Self {
        Self {
            tile_q: 16,
            tile_k: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnSaved {
    pub row_max: Tensor,
    pub row_sumexp: Tensor,
    pub tile_q: usize,
    pub tile_k: usize,
    /// Scratch bytes allocated per (batch, head) slice.
    pub aux_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct AttnGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    /// Same shape as the bias passed to the forward (summed over the batch
    /// axis for a broadcast `[H, L, L]` bias).
    pub dbias: Option<Tensor>,
    pub dgate: Option<Tensor>,
}

#[derive(Clone, Copy)]
enum BiasLayout {
    None,
    PerBatch,
    Broadcast,
}

struct Dims {
    b: usize,
    h: usize,
    l: usize,
    d: usize,
    bias: BiasLayout,
}

fn check(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    gate: Option<&Tensor>,
    tiles: AttnTiles,
) -> Result<Dims> {
    if q.rank() != 4 {
        return Err(Error::shape("attn_pair_bias", format!("q must be [B,H,L,D], got {:?}", q.shape())));
    }
    for (name, t) in [("k", k), ("v", v)] {
        if t.shape() != q.shape() {
            return Err(Error::shape(
                "attn_pair_bias",
                format!("{name} shape {:?} != q shape {:?}", t.shape(), q.shape()),
            ));
        }
    }
    if let Some(g) = gate {
        if g.shape() != q.shape() {
            return Err(Error::shape(
                "attn_pair_bias",
                format!("gate shape {:?} != q shape {:?}", g.shape(), q.shape()),
            ));
        }
    }
    if tiles.tile_q == 0 || tiles.tile_k == 0 {
        return Err(Error::Parameter {
            name: "tiles",
            msg: "tile sizes must be positive".into(),
        });
    }
    let (b, h, l, d) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
    let layout = match bias {
        None => BiasLayout::None,
        Some(t) if t.shape() == [b, h, l, l] => BiasLayout::PerBatch,
        Some(t) if t.shape() == [h, l, l] => BiasLayout::Broadcast,
        Some(t) => {
            return Err(Error::shape(
                "attn_pair_bias",
                format!(
                    "bias shape {:?} is neither [B,H,L,L]={:?} nor [H,L,L]={:?}",
                    t.shape(),
                    [b, h, l, l],
                    [h, l, l]
                ),
            ))
        }
    };
    Ok(Dims {
        b,
        h,
        l,
        d,
        bias: layout,
    })
}

fn bias_slice<'a>(bias: Option<&'a Tensor>, dims: &Dims, bh: usize) -> Option<&'a [f32]> {
    let ll = dims.l * dims.l;
    match (dims.bias, bias) {
        (BiasLayout::PerBatch, Some(t)) => Some(&t.data()[bh * ll..(bh + 1) * ll]),
        (BiasLayout::Broadcast, Some(t)) => {
            let h = bh % dims.h;
            Some(&t.data()[h * ll..(h + 1) * ll])
        }
        _ => None,
    }
}

/// Fills `s[tq x tk]` with logits for query rows `q0..q0+nq` against key
/// columns `k0..k0+tk`; key columns past `L` are padded with `-inf`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn logits_tile(
    s: &mut [f32],
    q: &[f32],
    k: &[f32],
    bias: Option<&[f32]>,
    q0: usize,
    nq: usize,
    k0: usize,
    tk: usize,
    l: usize,
    d: usize,
    scale: f32,
) {
    for i in 0..nq {
        let qi = &q[(q0 + i) * d..(q0 + i + 1) * d];
        let srow = &mut s[i * tk..(i + 1) * tk];
        for (j, sv) in srow.iter_mut().enumerate() {
            let kj = k0 + j;
            if kj >= l {
                *sv = f32::NEG_INFINITY;
                continue;
            }
            let kr = &k[kj * d..(kj + 1) * d];
            let mut dot = 0.0f32;
            for (a, b) in qi.iter().zip(kr) {
                dot += a * b;
            }
            let mut val = dot * scale;
            if let Some(bs) = bias {
                val += bs[(q0 + i) * l + kj];
            }
            *sv = val;
        }
    }
}

/// Forward pass. Returns the gated output and the softmax row statistics.
pub fn attn_pair_bias_fwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    gate: Option<&Tensor>,
    scale: f32,
    tiles: AttnTiles,
) -> Result<(Tensor, AttnSaved)> {
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::Parameter {
            name: "scale",
            msg: format!("must be positive, got {scale}"),
        });
    }
    let dims = check(q, k, v, bias, gate, tiles)?;
    let (l, d) = (dims.l, dims.d);
    let (tq, tk) = (tiles.tile_q.min(l.max(1)), tiles.tile_k.min(l.max(1)));
    let slice = l * d;
    let n_slices = dims.b * dims.h;
    let mut out = vec![0.0f32; n_slices * slice];
    let mut row_max = vec![0.0f32; n_slices * l];
    let mut row_sum = vec![0.0f32; n_slices * l];

    if slice > 0 {
        out.par_chunks_mut(slice)
            .zip(row_max.par_chunks_mut(l))
            .zip(row_sum.par_chunks_mut(l))
            .enumerate()
            .for_each(|(bh, ((o, mx), sm))| {
                let qs = &q.data()[bh * slice..(bh + 1) * slice];
                let ks = &k.data()[bh * slice..(bh + 1) * slice];
                let vs = &v.data()[bh * slice..(bh + 1) * slice];
                let bs = bias_slice(bias, &dims, bh);
                let mut s = vec![0.0f32; tq * tk];
                let mut acc = vec![0.0f32; tq * d];
                let mut m = vec![0.0f32; tq];
                let mut den = vec![0.0f32; tq];
                for q0 in (0..l).step_by(tq) {
                    let nq = tq.min(l - q0);
                    m.fill(f32::NEG_INFINITY);
                    den.fill(0.0);
                    acc.fill(0.0);
                    for k0 in (0..l).step_by(tk) {
                        logits_tile(&mut s, qs, ks, bs, q0, nq, k0, tk, l, d, scale);
                        for i in 0..nq {
                            let srow = &mut s[i * tk..(i + 1) * tk];
                            let tile_max = srow.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                            let m_new = m[i].max(tile_max);
                            let corr = (m[i] - m_new).exp();
                            let arow = &mut acc[i * d..(i + 1) * d];
                            if corr != 1.0 {
                                den[i] *= corr;
                                for a in arow.iter_mut() {
                                    *a *= corr;
                                }
                            }
                            for (j, sv) in srow.iter_mut().enumerate() {
                                let p = (*sv - m_new).exp();
                                *sv = p;
                                den[i] += p;
                                if p != 0.0 {
                                    let vr = &vs[(k0 + j) * d..(k0 + j + 1) * d];
                                    for (a, &vv) in arow.iter_mut().zip(vr) {
                                        *a += p * vv;
                                    }
                                }
                            }
                            m[i] = m_new;
                        }
                    }
                    for i in 0..nq {
                        let row = q0 + i;
                        mx[row] = m[i];
                        sm[row] = den[i];
                        let inv = 1.0 / den[i];
                        let orow = &mut o[row * d..(row + 1) * d];
                        for (ov, &a) in orow.iter_mut().zip(&acc[i * d..(i + 1) * d]) {
                            *ov = a * inv;
                        }
                        if let Some(g) = gate {
                            let gr = &g.data()[bh * slice + row * d..bh * slice + (row + 1) * d];
                            for (ov, &gv) in orow.iter_mut().zip(gr) {
                                *ov *= sigmoid_scalar(gv);
                            }
                        }
                    }
                }
            });
    }
    record_dispatch();
    let aux_bytes = 4 * (tq * tk + tq * d + 2 * tq);
    Ok((
        Tensor::new(q.shape(), out)?,
        AttnSaved {
            row_max: Tensor::new(&[dims.b, dims.h, l], row_max)?,
            row_sumexp: Tensor::new(&[dims.b, dims.h, l], row_sum)?,
            tile_q: tq,
            tile_k: tk,
            aux_bytes,
        },
    ))
}

struct SliceGrads {
    dq: Vec<f32>,
    dk: Vec<f32>,
    dv: Vec<f32>,
    dbias: Vec<f32>,
    dgate: Vec<f32>,
}

/// Backward pass; probabilities are recomputed from `saved`.
#[allow(clippy::too_many_arguments)]
pub fn attn_pair_bias_bwd(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    gate: Option<&Tensor>,
    scale: f32,
    saved: &AttnSaved,
) -> Result<AttnGrads> {
    let dims = check(
        q,
        k,
        v,
        bias,
        gate,
        AttnTiles {
            tile_q: saved.tile_q,
            tile_k: saved.tile_k,
        },
    )?;
    if dout.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "attn_pair_bias_bwd",
            lhs: dout.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    let (l, d) = (dims.l, dims.d);
    if saved.row_max.shape() != [dims.b, dims.h, l] {
        return Err(Error::shape(
            "attn_pair_bias_bwd",
            "saved statistics do not match the inputs",
        ));
    }
    let (tq, tk) = (saved.tile_q, saved.tile_k);
    let slice = l * d;
    let n_slices = dims.b * dims.h;
    let want_bias = bias.is_some();

    let per_slice: Vec<SliceGrads> = (0..n_slices)
        .into_par_iter()
        .map(|bh| {
            let qs = &q.data()[bh * slice..(bh + 1) * slice];
            let ks = &k.data()[bh * slice..(bh + 1) * slice];
            let vs = &v.data()[bh * slice..(bh + 1) * slice];
            let dos = &dout.data()[bh * slice..(bh + 1) * slice];
            let gs = gate.map(|g| &g.data()[bh * slice..(bh + 1) * slice]);
            let bs = bias_slice(bias, &dims, bh);
            let mx = &saved.row_max.data()[bh * l..(bh + 1) * l];
            let sm = &saved.row_sumexp.data()[bh * l..(bh + 1) * l];

            let mut g = SliceGrads {
                dq: vec![0.0; slice],
                dk: vec![0.0; slice],
                dv: vec![0.0; slice],
                dbias: if want_bias { vec![0.0; l * l] } else { Vec::new() },
                dgate: if gs.is_some() { vec![0.0; slice] } else { Vec::new() },
            };
            let mut s = vec![0.0f32; tq * tk];
            let mut o_pre = vec![0.0f32; tq * d];
            let mut do_pre = vec![0.0f32; tq * d];
            let mut delta = vec![0.0f32; tq];

            for q0 in (0..l).step_by(tq) {
                let nq = tq.min(l - q0);
                // Recompute the ungated output rows from the saved statistics.
                o_pre.fill(0.0);
                for k0 in (0..l).step_by(tk) {
                    logits_tile(&mut s, qs, ks, bs, q0, nq, k0, tk, l, d, scale);
                    for i in 0..nq {
                        let (m, inv) = (mx[q0 + i], 1.0 / sm[q0 + i]);
                        let orow = &mut o_pre[i * d..(i + 1) * d];
                        for j in 0..tk {
                            let p = (s[i * tk + j] - m).exp() * inv;
                            if p != 0.0 {
                                let vr = &vs[(k0 + j) * d..(k0 + j + 1) * d];
                                for (o, &vv) in orow.iter_mut().zip(vr) {
                                    *o += p * vv;
                                }
                            }
                        }
                    }
                }
                for i in 0..nq {
                    let row = q0 + i;
                    let mut acc = 0.0f32;
                    for c in 0..d {
                        let dov = dos[row * d + c];
                        let op = o_pre[i * d + c];
                        let dp = match gs {
                            Some(gr) => {
                                let sg = sigmoid_scalar(gr[row * d + c]);
                                g.dgate[row * d + c] = dov * op * sg * (1.0 - sg);
                                dov * sg
                            }
                            None => dov,
                        };
                        do_pre[i * d + c] = dp;
                        acc += dp * op;
                    }
                    delta[i] = acc;
                }
                for k0 in (0..l).step_by(tk) {
                    logits_tile(&mut s, qs, ks, bs, q0, nq, k0, tk, l, d, scale);
                    for i in 0..nq {
                        let row = q0 + i;
                        let (m, inv) = (mx[row], 1.0 / sm[row]);
                        let dpr = &do_pre[i * d..(i + 1) * d];
                        for j in 0..tk {
                            let col = k0 + j;
                            if col >= l {
                                break;
                            }
                            let p = (s[i * tk + j] - m).exp() * inv;
                            let vr = &vs[col * d..(col + 1) * d];
                            let mut dpv = 0.0f32;
                            for c in 0..d {
                                g.dv[col * d + c] += p * dpr[c];
                                dpv += dpr[c] * vr[c];
                            }
                            let ds = p * (dpv - delta[i]);
                            if want_bias {
                                g.dbias[row * l + col] = ds;
                            }
                            let dss = ds * scale;
                            for c in 0..d {
                                g.dq[row * d + c] += dss * ks[col * d + c];
                                g.dk[col * d + c] += dss * qs[row * d + c];
                            }
                        }
                    }
                }
            }
            g
        })
        .collect();

    let mut dq = Vec::with_capacity(n_slices * slice);
    let mut dk = Vec::with_capacity(n_slices * slice);
    let mut dv = Vec::with_capacity(n_slices * slice);
    let mut dgate = Vec::with_capacity(if gate.is_some() { n_slices * slice } else { 0 });
    for sg in &per_slice {
        dq.extend_from_slice(&sg.dq);
        dk.extend_from_slice(&sg.dk);
        dv.extend_from_slice(&sg.dv);
        dgate.extend_from_slice(&sg.dgate);
    }
    let dbias = match dims.bias {
        BiasLayout::None => None,
        BiasLayout::PerBatch => {
            let mut db = Vec::with_capacity(n_slices * l * l);
            for sg in &per_slice {
                db.extend_from_slice(&sg.dbias);
            }
            Some(Tensor::new(&[dims.b, dims.h, l, l], db)?)
        }
        BiasLayout::Broadcast => {
            // Unbroadcast: sum over the batch axis in ascending order.
            let ll = l * l;
            let mut db = vec![0.0f32; dims.h * ll];
            for b in 0..dims.b {
                for h in 0..dims.h {
                    let src = &per_slice[b * dims.h + h].dbias;
                    for (o, &x) in db[h * ll..(h + 1) * ll].iter_mut().zip(src) {
                        *o += x;
                    }
                }
            }
            Some(Tensor::new(&[dims.h, l, l], db)?)
        }
    };
    record_dispatch();
    Ok(AttnGrads {
        dq: Tensor::new(q.shape(), dq)?,
        dk: Tensor::new(q.shape(), dk)?,
        dv: Tensor::new(q.shape(), dv)?,
        dbias,
        dgate: if gate.is_some() {
            Some(Tensor::new(q.shape(), dgate)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, max_abs_diff, Precision};
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand::rngs::StdRng {
        rand::rngs::StdRng::seed_from_u64(seed)
    }

    /// Unfused composition built from tensor-core ops: gemm, add, softmax,
    /// gemm, sigmoid-mul.
    fn unfused(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        bias: Option<&Tensor>,
        gate: Option<&Tensor>,
        scale: f32,
    ) -> Tensor {
        let (b, h, l, d) = (q.dim(0), q.dim(1), q.dim(2), q.dim(3));
        let mut out = Vec::new();
        for bi in 0..b {
            for hi in 0..h {
                let bh = bi * h + hi;
                let take = |t: &Tensor| {
                    Tensor::new(&[l, d], t.data()[bh * l * d..(bh + 1) * l * d].to_vec()).unwrap()
                };
                let (qs, ks, vs) = (take(q), take(k), take(v));
                let kt = tensor::transpose2d(&ks).unwrap();
                let mut logits = tensor::scale(&tensor::gemm(&qs, &kt, Precision::F32).unwrap(), scale);
                if let Some(bt) = bias {
                    let off = if bt.rank() == 4 { bh } else { hi } * l * l;
                    let bs = Tensor::new(&[l, l], bt.data()[off..off + l * l].to_vec()).unwrap();
                    logits = tensor::add(&logits, &bs).unwrap();
                }
                let p = tensor::softmax_lastdim(&logits).unwrap();
                let mut o = tensor::gemm(&p, &vs, Precision::F32).unwrap();
                if let Some(g) = gate {
                    o = tensor::mul(&o, &tensor::sigmoid(&take(g))).unwrap();
                }
                out.extend_from_slice(o.data());
            }
        }
        Tensor::new(q.shape(), out).unwrap()
    }

    #[test]
    fn single_key_returns_gated_values() {
        let shape = [2, 3, 1, 4];
        let q = Tensor::randn(&shape, 1.0, &mut rng(1));
        let k = Tensor::randn(&shape, 1.0, &mut rng(2));
        let v = Tensor::randn(&shape, 1.0, &mut rng(3));
        let g = Tensor::randn(&shape, 1.0, &mut rng(4));
        let (o, _) = attn_pair_bias_fwd(&q, &k, &v, None, Some(&g), 0.5, AttnTiles::default()).unwrap();
        let want = tensor::mul(&v, &tensor::sigmoid(&g)).unwrap();
        assert!(max_abs_diff(o.data(), want.data()) < 1e-7);
    }

    #[test]
    fn plain_attention_matches_materialized_oracle() {
        let shape = [2, 2, 13, 8];
        let q = Tensor::randn(&shape, 1.0, &mut rng(5));
        let k = Tensor::randn(&shape, 1.0, &mut rng(6));
        let v = Tensor::randn(&shape, 1.0, &mut rng(7));
        let scale = 1.0 / (8f32).sqrt();
        let tiles = AttnTiles { tile_q: 4, tile_k: 5 };
        let (o, saved) = attn_pair_bias_fwd(&q, &k, &v, None, None, scale, tiles).unwrap();
        assert!(max_abs_diff(o.data(), unfused(&q, &k, &v, None, None, scale).data()) < 1e-6);
        assert!(saved.row_sumexp.data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn masking_selects_single_column() {
        let shape = [1, 1, 6, 3];
        let q = Tensor::randn(&shape, 1.0, &mut rng(8));
        let k = Tensor::randn(&shape, 1.0, &mut rng(9));
        let v = Tensor::randn(&shape, 1.0, &mut rng(10));
        let j = 4;
        let bias = Tensor::from_fn(&[1, 6, 6], |i| if i % 6 == j { 0.0 } else { -1e9 });
        let (o, _) = attn_pair_bias_fwd(&q, &k, &v, Some(&bias), None, 1.0, AttnTiles { tile_q: 4, tile_k: 4 }).unwrap();
        for row in o.data().chunks(3) {
            assert!(max_abs_diff(row, &v.data()[j * 3..(j + 1) * 3]) < 1e-6);
        }
    }

    #[test]
    fn random_bias_and_gate_match_unfused() {
        let shape = [2, 2, 16, 8];
        let q = Tensor::randn(&shape, 1.0, &mut rng(11));
        let k = Tensor::randn(&shape, 1.0, &mut rng(12));
        let v = Tensor::randn(&shape, 1.0, &mut rng(13));
        let g = Tensor::randn(&shape, 1.0, &mut rng(14));
        let scale = 1.0 / (8f32).sqrt();
        for bias in [
            Tensor::randn(&[2, 2, 16, 16], 1.0, &mut rng(15)),
            Tensor::randn(&[2, 16, 16], 1.0, &mut rng(16)),
        ] {
            let (o, _) =
                attn_pair_bias_fwd(&q, &k, &v, Some(&bias), Some(&g), scale, AttnTiles { tile_q: 8, tile_k: 4 }).unwrap();
            let want = unfused(&q, &k, &v, Some(&bias), Some(&g), scale);
            assert!(max_abs_diff(o.data(), want.data()) < 1e-5);
        }
    }

    #[test]
    fn bad_bias_shape_is_rejected() {
        let shape = [1, 2, 4, 2];
        let q = Tensor::zeros(&shape);
        let bias = Tensor::zeros(&[2, 4, 5]);
        assert!(matches!(
            attn_pair_bias_fwd(&q, &q, &q, Some(&bias), None, 1.0, AttnTiles::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn tile_padding_does_not_change_outputs() {
        let shape = [1, 2, 11, 4];
        let q = Tensor::randn(&shape, 1.0, &mut rng(17));
        let k = Tensor::randn(&shape, 1.0, &mut rng(18));
        let v = Tensor::randn(&shape, 1.0, &mut rng(19));
        let bias = Tensor::randn(&[2, 11, 11], 1.0, &mut rng(20));
        let (exact, _) = attn_pair_bias_fwd(&q, &k, &v, Some(&bias), None, 0.5, AttnTiles { tile_q: 11, tile_k: 11 }).unwrap();
        for (tq, tk) in [(4, 4), (3, 8), (16, 16), (1, 1)] {
            let (o, _) = attn_pair_bias_fwd(&q, &k, &v, Some(&bias), None, 0.5, AttnTiles { tile_q: tq, tile_k: tk }).unwrap();
            assert!(max_abs_diff(o.data(), exact.data()) < 1e-6, "tiles {tq}x{tk}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let shape = [1, 2, 5, 3];
        let q = Tensor::randn(&shape, 1.0, &mut rng(21));
        let bias = Tensor::randn(&[2, 5, 5], 1.0, &mut rng(22));
        let g = Tensor::randn(&shape, 1.0, &mut rng(23));
        let (_, saved) = attn_pair_bias_fwd(&q, &q, &q, Some(&bias), Some(&g), 1.0, AttnTiles::default()).unwrap();
        let grads = attn_pair_bias_bwd(&Tensor::zeros(&shape), &q, &q, &q, Some(&bias), Some(&g), 1.0, &saved).unwrap();
        for t in [&grads.dq, &grads.dk, &grads.dv, grads.dbias.as_ref().unwrap(), grads.dgate.as_ref().unwrap()] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn broadcast_dbias_is_sum_of_per_sample_dbias() {
        let shape = [3, 2, 6, 4];
        let q = Tensor::randn(&shape, 1.0, &mut rng(24));
        let k = Tensor::randn(&shape, 1.0, &mut rng(25));
        let v = Tensor::randn(&shape, 1.0, &mut rng(26));
        let dout = Tensor::randn(&shape, 1.0, &mut rng(27));
        let bias = Tensor::randn(&[2, 6, 6], 1.0, &mut rng(28));
        let tiles = AttnTiles { tile_q: 4, tile_k: 4 };
        let (_, saved) = attn_pair_bias_fwd(&q, &k, &v, Some(&bias), None, 0.5, tiles).unwrap();
        let g = attn_pair_bias_bwd(&dout, &q, &k, &v, Some(&bias), None, 0.5, &saved).unwrap();

        let full = tensor::concat(&[&bias.clone().reshape(&[1, 2, 6, 6]).unwrap(); 3], 0).unwrap();
        let (_, saved_full) = attn_pair_bias_fwd(&q, &k, &v, Some(&full), None, 0.5, tiles).unwrap();
        let gf = attn_pair_bias_bwd(&dout, &q, &k, &v, Some(&full), None, 0.5, &saved_full).unwrap();
        let summed = tensor::reduce_sum(gf.dbias.as_ref().unwrap(), 0).unwrap();
        assert_eq!(g.dbias.unwrap().data(), summed.data());
    }
}

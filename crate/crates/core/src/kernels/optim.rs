//! Packed parameter storage, flat gradient buffers, the fused Adam + SWA
//! update and buffer-based global-norm clipping.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{record_dispatch, round_bf16_slice, Tensor};

/// Elements per work item in the fused optimizer traversal.
const OPT_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Handle to a registered parameter segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegId(pub(crate) usize);

/// Every trainable parameter, packed into one contiguous buffer.
#[derive(Clone, Debug, Default)]
pub struct PackedParams {
    data: Vec<f32>,
    segments: Vec<Segment>,
    by_name: HashMap<String, SegId>,
}

impl PackedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut(usize) -> f32,
    ) -> Result<SegId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(name, "parameter registered twice"));
        }
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.extend((0..len).map(&mut init));
        let id = SegId(self.segments.len());
        self.segments.push(Segment {
            name: name.clone(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: SegId) -> &[f32] {
        let s = &self.segments[id.0];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn get_mut(&mut self, id: SegId) -> &mut [f32] {
        let s = &self.segments[id.0];
        &mut self.data[s.offset..s.offset + s.len]
    }

    /// Copies the segment out as a shaped tensor.
    pub fn tensor(&self, id: SegId) -> Tensor {
        let s = &self.segments[id.0];
        Tensor::new(&s.shape, self.get(id).to_vec()).expect("segment shape matches length")
    }

    pub fn segment(&self, id: SegId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn id(&self, name: &str) -> Option<SegId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = SegId> {
        (0..self.segments.len()).map(SegId)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same layout with values replaced by `values`.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        if values.len() != self.data.len() {
            return Err(Error::Dimension {
                op: "PackedParams::with_values",
                lhs: vec![self.data.len()],
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            data: values,
            segments: self.segments.clone(),
            by_name: self.by_name.clone(),
        })
    }

    /// Copy with every value rounded onto the bf16 grid.
    pub fn rounded_bf16(&self) -> Self {
        let mut out = self.clone();
        round_bf16_slice(&mut out.data);
        out
    }
}

/// Gradients laid out exactly like [`PackedParams`], split into a few flat
/// buffers along segment boundaries.
#[derive(Clone, Debug)]
pub struct GradBufferSet {
    buffers: Vec<Vec<f32>>,
    /// Global element offset of each buffer.
    starts: Vec<usize>,
    /// Per segment: (buffer index, offset within buffer, length).
    locs: Vec<(usize, usize, usize)>,
}

impl GradBufferSet {
    /// Groups consecutive segments into at most `n_buffers` buffers of
    /// roughly equal size.
    pub fn new(params: &PackedParams, n_buffers: usize) -> Self {
        let n_buffers = n_buffers.max(1);
        let total = params.len();
        let target = total.div_ceil(n_buffers).max(1);
        let mut buffers: Vec<Vec<f32>> = vec![Vec::new()];
        let mut starts = vec![0usize];
        let mut locs = Vec::with_capacity(params.segments.len());
        for seg in &params.segments {
            let cur = buffers.len() - 1;
            if !buffers[cur].is_empty()
                && buffers[cur].len() + seg.len > target
                && buffers.len() < n_buffers
            {
                starts.push(seg.offset);
                buffers.push(Vec::new());
            }
            let b = buffers.len() - 1;
            let off = buffers[b].len();
            locs.push((b, off, seg.len));
            buffers[b].resize(off + seg.len, 0.0);
        }
        Self {
            buffers,
            starts,
            locs,
        }
    }

    pub fn seg(&self, id: SegId) -> &[f32] {
        let (b, off, len) = self.locs[id.0];
        &self.buffers[b][off..off + len]
    }

    pub fn seg_mut(&mut self, id: SegId) -> &mut [f32] {
        let (b, off, len) = self.locs[id.0];
        &mut self.buffers[b][off..off + len]
    }

    /// Adds `src` into the segment elementwise.
    pub fn accumulate(&mut self, id: SegId, src: &[f32]) {
        let dst = self.seg_mut(id);
        debug_assert_eq!(dst.len(), src.len());
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.buffers
    }

    pub fn buffer_starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn total_len(&self) -> usize {
        self.buffers.iter().map(Vec::len).sum()
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.fill(0.0);
        }
    }

    /// Concatenation of all buffers, i.e. the gradient in packed order.
    pub fn flat(&self) -> Vec<f32> {
        self.buffers.concat()
    }

    /// Overwrites from a packed-order slice.
    pub fn copy_from_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Dimension {
                op: "GradBufferSet::copy_from_flat",
                lhs: vec![self.total_len()],
                rhs: vec![flat.len()],
            });
        }
        for (b, &s) in self.buffers.iter_mut().zip(&self.starts) {
            let n = b.len();
            b.copy_from_slice(&flat[s..s + n]);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for b in &mut self.buffers {
            for g in b.iter_mut() {
                *g *= s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSwaHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub swa_decay: f32,
}

impl Default for AdamSwaHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            swa_decay: 0.999,
        }
    }
}

impl AdamSwaHyper {
    /// `(1 - beta1^t, 1 - beta2^t)`.
    pub fn bias_corrections(&self, step: u64) -> (f32, f32) {
        let t = step.min(i32::MAX as u64) as i32;
        (
            (1.0 - (self.beta1 as f64).powi(t)) as f32,
            (1.0 - (self.beta2 as f64).powi(t)) as f32,
        )
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub swa: Vec<f32>,
    pub step_count: u64,
    pub hyper: AdamSwaHyper,
}

impl OptimState {
    /// Zero moments; the averaged weights start at the current parameters.
    pub fn new(params: &PackedParams, hyper: AdamSwaHyper) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            swa: params.data().to_vec(),
            step_count: 0,
            hyper,
        }
    }
}

/// Element traffic of one fused optimizer call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FusedTraffic {
    pub grad_reads: usize,
    pub m_writes: usize,
    pub v_writes: usize,
    pub param_writes: usize,
    pub swa_writes: usize,
}

/// One Adam step followed by the SWA update, in a single traversal over
/// every parameter. `global_scale` is the clip factor.
pub fn fused_adam_swa_step(
    params: &mut PackedParams,
    grads: &GradBufferSet,
    state: &mut OptimState,
    global_scale: f32,
) -> Result<FusedTraffic> {
    if !(global_scale > 0.0 && global_scale <= 1.0) {
        return Err(Error::Parameter {
            name: "global_scale",
            msg: format!("must lie in (0, 1], got {global_scale}"),
        });
    }
    let n = params.len();
    if grads.total_len() != n || state.m.len() != n || state.v.len() != n || state.swa.len() != n {
        return Err(Error::Dimension {
            op: "fused_adam_swa_step",
            lhs: vec![n],
            rhs: vec![grads.total_len(), state.m.len(), state.v.len(), state.swa.len()],
        });
    }
    state.step_count += 1;
    let h = state.hyper;
    let (bc1, bc2) = h.bias_corrections(state.step_count);
    let (b1, b2, lr, eps, d) = (h.beta1, h.beta2, h.lr, h.eps, h.swa_decay);

    let mut traffic = FusedTraffic::default();
    let mut p_rest: &mut [f32] = params.data_mut();
    let mut m_rest: &mut [f32] = &mut state.m;
    let mut v_rest: &mut [f32] = &mut state.v;
    let mut s_rest: &mut [f32] = &mut state.swa;
    let mut work = Vec::with_capacity(grads.buffers().len());
    for g in grads.buffers() {
        let len = g.len();
        let (p, pr) = std::mem::take(&mut p_rest).split_at_mut(len);
        let (m, mr) = std::mem::take(&mut m_rest).split_at_mut(len);
        let (v, vr) = std::mem::take(&mut v_rest).split_at_mut(len);
        let (s, sr) = std::mem::take(&mut s_rest).split_at_mut(len);
        p_rest = pr;
        m_rest = mr;
        v_rest = vr;
        s_rest = sr;
        work.push((g.as_slice(), p, m, v, s));
    }

    let counts: Vec<usize> = work
        .into_par_iter()
        .flat_map_iter(|(g, p, m, v, s)| {
            g.chunks(OPT_CHUNK)
                .zip(p.chunks_mut(OPT_CHUNK))
                .zip(m.chunks_mut(OPT_CHUNK))
                .zip(v.chunks_mut(OPT_CHUNK))
                .zip(s.chunks_mut(OPT_CHUNK))
                .map(|((((g, p), m), v), s)| (g, p, m, v, s))
                .collect::<Vec<_>>()
        })
        .map(|(g, p, m, v, s)| {
            for i in 0..g.len() {
                let gi = g[i] * global_scale;
                let mi = b1 * m[i] + (1.0 - b1) * gi;
                let vi = b2 * v[i] + (1.0 - b2) * gi * gi;
                let pi = p[i] - lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                m[i] = mi;
                v[i] = vi;
                p[i] = pi;
                s[i] = d * s[i] + (1.0 - d) * pi;
            }
            g.len()
        })
        .collect();
    let elems: usize = counts.iter().sum();
    traffic.grad_reads = elems;
    traffic.m_writes = elems;
    traffic.v_writes = elems;
    traffic.param_writes = elems;
    traffic.swa_writes = elems;
    record_dispatch();
    Ok(traffic)
}

/// Computes the global L2 norm over the flat buffers (one reduction per
/// buffer) and returns the clip factor `min(1, max_norm / norm)`.
pub fn clip_grads_global_norm(grads: &GradBufferSet, max_norm: f32) -> Result<f32> {
    Ok(clip_with_norm(grads, max_norm)?.0)
}

/// Like [`clip_grads_global_norm`] but also returns the norm.
pub fn clip_with_norm(grads: &GradBufferSet, max_norm: f32) -> Result<(f32, f64)> {
    if !(max_norm > 0.0) {
        return Err(Error::Parameter {
            name: "max_norm",
            msg: format!("must be positive, got {max_norm}"),
        });
    }
    let mut total = 0.0f64;
    for b in grads.buffers() {
        let partial: f64 = b.iter().map(|&g| (g as f64) * (g as f64)).sum();
        record_dispatch();
        total += partial;
    }
    let norm = total.sqrt();
    if !norm.is_finite() {
        let index = grads
            .flat()
            .iter()
            .position(|g| !g.is_finite())
            .unwrap_or(0);
        return Err(Error::NonFinite {
            op: "clip_grads_global_norm",
            index,
        });
    }
    let scale = if norm > max_norm as f64 {
        (max_norm as f64 / norm) as f32
    } else {
        1.0
    };
    Ok((scale, norm))
}

/// Unfused baseline: one reduction dispatch per gradient tensor.
pub fn global_norm_per_tensor(grads: &[Tensor]) -> f64 {
    let mut total = 0.0f64;
    for g in grads {
        total += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        record_dispatch();
    }
    total.sqrt()
}

//! Op launcher used by the model code.
//!
//! Eager launches perform the per-op host work a framework would: build a
//! workload signature, look the kernel configuration up in the tuning table
//! and (optionally) suffer injected host jitter. Capture additionally records
//! an op descriptor; replay walks a recorded plan, checks each launch against
//! its descriptor and skips the host work entirely.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::tensor::Precision;

/// Kernel classes used for workload characterisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCategory {
    /// GEMM family.
    MathBound,
    /// Elementwise, normalisation, softmax-style kernels.
    MemoryBound,
    /// Copies, permutes and fills.
    MemoryOp,
}

impl OpCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            OpCategory::MathBound => "math_bound",
            OpCategory::MemoryBound => "memory_bound",
            OpCategory::MemoryOp => "memory_op",
        }
    }
}

/// Model sub-modules that may carry their own activation precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    RowAttention,
    ColAttention,
    MsaTransition,
    OuterProductMean,
    TriangleStart,
    TriangleEnd,
    PairTransition,
    PairBias,
    Recycle,
    Structure,
}

impl Module {
    pub const ALL: [Module; 10] = [
        Module::RowAttention,
        Module::ColAttention,
        Module::MsaTransition,
        Module::OuterProductMean,
        Module::TriangleStart,
        Module::TriangleEnd,
        Module::PairTransition,
        Module::PairBias,
        Module::Recycle,
        Module::Structure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Module::RowAttention => "row_attention",
            Module::ColAttention => "col_attention",
            Module::MsaTransition => "msa_transition",
            Module::OuterProductMean => "outer_product_mean",
            Module::TriangleStart => "triangle_start",
            Module::TriangleEnd => "triangle_end",
            Module::PairTransition => "pair_transition",
            Module::PairBias => "pair_bias",
            Module::Recycle => "recycle",
            Module::Structure => "structure",
        }
    }

    pub fn parse(s: &str) -> Option<Module> {
        Module::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Activation precision with per-module overrides. Statistics inside
/// LayerNorm and softmax always accumulate in f32.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecisionPolicy {
    pub default: Precision,
    pub overrides: HashMap<Module, Precision>,
}

impl PrecisionPolicy {
    pub fn uniform(p: Precision) -> Self {
        Self {
            default: p,
            overrides: HashMap::new(),
        }
    }

    pub fn for_module(&self, m: Module) -> Precision {
        self.overrides.get(&m).copied().unwrap_or(self.default)
    }
}

/// Random host pauses inserted before eager launches.
#[derive(Clone, Debug)]
pub struct HostJitter {
    pub prob: f64,
    pub pause: Duration,
    rng: StdRng,
}

impl HostJitter {
    pub fn new(prob: f64, pause: Duration, seed: u64) -> Self {
        Self {
            prob,
            pause,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    fn maybe_pause(&mut self) {
        if self.prob > 0.0 && self.rng.gen_bool(self.prob.min(1.0)) {
            std::thread::sleep(self.pause);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpDesc {
    pub op: &'static str,
    pub shape_hash: u64,
    pub config: KernelConfig,
}

/// Linear op list recorded from one eager execution.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    pub label: String,
    pub ops: Vec<OpDesc>,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub op: &'static str,
    pub category: OpCategory,
    pub kernel_s: f64,
    /// Host-side time spent before the kernel started.
    pub host_s: f64,
    pub recompute: bool,
}

/// Bytes of activations held for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemTracker {
    current: usize,
    peak: usize,
}

impl MemTracker {
    pub fn hold(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn reset_peak(&mut self) {
        self.peak = self.current;
    }
}

enum Mode {
    Eager,
    Capture(Vec<OpDesc>),
    Replay {
        plan: Arc<ExecutionPlan>,
        cursor: usize,
    },
}

pub struct Exec {
    mode: Mode,
    tuning: HashMap<String, KernelConfig>,
    jitter: Option<HostJitter>,
    trace_enabled: bool,
    trace: Vec<TraceEntry>,
    mem: MemTracker,
    policy: PrecisionPolicy,
    module: Option<Module>,
    recomputing: bool,
    launches: u64,
    recompute_launches: u64,
}

impl Default for Exec {
    fn default() -> Self {
        Self::new(PrecisionPolicy::default())
    }
}

impl Exec {
    pub fn new(policy: PrecisionPolicy) -> Self {
        Self {
            mode: Mode::Eager,
            tuning: HashMap::new(),
            jitter: None,
            trace_enabled: false,
            trace: Vec::new(),
            mem: MemTracker::default(),
            policy,
            module: None,
            recomputing: false,
            launches: 0,
            recompute_launches: 0,
        }
    }

    pub fn with_jitter(mut self, jitter: Option<HostJitter>) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn set_tuning(&mut self, op: &str, signature: &str, cfg: KernelConfig) {
        self.tuning.insert(format!("{op}|{signature}"), cfg);
    }

    pub fn enable_trace(&mut self, on: bool) {
        self.trace_enabled = on;
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.trace)
    }

    pub fn mem(&self) -> &MemTracker {
        &self.mem
    }

    pub fn mem_mut(&mut self) -> &mut MemTracker {
        &mut self.mem
    }

    pub fn policy(&self) -> &PrecisionPolicy {
        &self.policy
    }

    pub fn set_module(&mut self, m: Module) {
        self.module = Some(m);
    }

    /// Output precision for the module currently executing.
    pub fn precision(&self) -> Precision {
        match self.module {
            Some(m) => self.policy.for_module(m),
            None => self.policy.default,
        }
    }

    pub fn set_recomputing(&mut self, on: bool) {
        self.recomputing = on;
    }

    pub fn launches(&self) -> u64 {
        self.launches
    }

    pub fn recompute_launches(&self) -> u64 {
        self.recompute_launches
    }

    pub fn is_replaying(&self) -> bool {
        matches!(self.mode, Mode::Replay { .. })
    }

    pub fn begin_capture(&mut self) {
        self.mode = Mode::Capture(Vec::new());
    }

    /// Ends capture and returns the recorded plan.
    pub fn finish_capture(&mut self, label: impl Into<String>) -> Result<ExecutionPlan> {
        match std::mem::replace(&mut self.mode, Mode::Eager) {
            Mode::Capture(ops) => Ok(ExecutionPlan {
                label: label.into(),
                ops,
            }),
            other => {
                self.mode = other;
                Err(Error::CaptureInvalidated {
                    key: label.into(),
                    msg: "finish_capture without begin_capture".into(),
                })
            }
        }
    }

    pub fn begin_replay(&mut self, plan: Arc<ExecutionPlan>) {
        self.mode = Mode::Replay { plan, cursor: 0 };
    }

    /// Ends replay; every recorded op must have been consumed.
    pub fn finish_replay(&mut self) -> Result<()> {
        match std::mem::replace(&mut self.mode, Mode::Eager) {
            Mode::Replay { plan, cursor } if cursor == plan.ops.len() => Ok(()),
            Mode::Replay { plan, cursor } => Err(Error::CaptureInvalidated {
                key: plan.label.clone(),
                msg: format!("replay consumed {cursor} of {} ops", plan.ops.len()),
            }),
            _ => Ok(()),
        }
    }

    /// Abandons capture or replay without validation.
    pub fn reset_mode(&mut self) {
        self.mode = Mode::Eager;
    }

    /// Launches one kernel. `default` is used when the tuning table has no
    /// entry for the workload.
    pub fn launch<T>(
        &mut self,
        op: &'static str,
        category: OpCategory,
        shapes: &[&[usize]],
        default: &KernelConfig,
        f: impl FnOnce(&KernelConfig) -> Result<T>,
    ) -> Result<T> {
        let t0 = Instant::now();
        let hash = shape_hash(op, shapes);
        let cfg = match &mut self.mode {
            Mode::Replay { plan, cursor } => {
                let desc = plan.ops.get(*cursor).ok_or_else(|| Error::CaptureInvalidated {
                    key: plan.label.clone(),
                    msg: format!("op `{op}` beyond the {} recorded ops", plan.ops.len()),
                })?;
                if desc.op != op || desc.shape_hash != hash {
                    return Err(Error::CaptureInvalidated {
                        key: plan.label.clone(),
                        msg: format!(
                            "op {} expected `{}`, got `{op}` with shapes {shapes:?}",
                            *cursor, desc.op
                        ),
                    });
                }
                *cursor += 1;
                desc.config.clone()
            }
            _ => {
                let signature = signature(shapes);
                let cfg = self
                    .tuning
                    .get(&format!("{op}|{signature}"))
                    .cloned()
                    .unwrap_or_else(|| default.clone());
                if let Some(j) = &mut self.jitter {
                    j.maybe_pause();
                }
                if let Mode::Capture(ops) = &mut self.mode {
                    ops.push(OpDesc {
                        op,
                        shape_hash: hash,
                        config: cfg.clone(),
                    });
                }
                cfg
            }
        };
        let t1 = Instant::now();
        let out = f(&cfg)?;
        self.launches += 1;
        if self.recomputing {
            self.recompute_launches += 1;
        }
        if self.trace_enabled {
            self.trace.push(TraceEntry {
                op,
                category,
                kernel_s: t1.elapsed().as_secs_f64(),
                host_s: (t1 - t0).as_secs_f64(),
                recompute: self.recomputing,
            });
        }
        Ok(out)
    }
}

/// Workload signature as used in the tuning table and autotune cache.
pub fn signature(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| {
            s.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn shape_hash(op: &str, shapes: &[&[usize]]) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for b in op.bytes() {
        eat(b as u64);
    }
    for s in shapes {
        eat(u64::MAX);
        for &d in *s {
            eat(d as u64);
        }
    }
    h
}

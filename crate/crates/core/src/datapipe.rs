//! Worker-pool batch preparation with out-of-order delivery.
//!
//! Workers claim sample indices in order and prepare them concurrently. The
//! consumer either waits for the next index (blocking) or takes the smallest
//! index that is already ready (nonblocking). Workers only claim indices
//! below `lowest undelivered + capacity`, so a slow batch holds back the
//! window and delivery never drifts more than `capacity` from index order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Blocking,
    Nonblocking,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "blocking" => Some(Mode::Blocking),
            "nonblocking" => Some(Mode::Nonblocking),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Blocking => "blocking",
            Mode::Nonblocking => "nonblocking",
        }
    }
}

/// How a worker spends a sample's preparation cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CostMode {
    #[default]
    Sleep,
    Busy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub index: usize,
    pub seq_len: usize,
    pub msa_depth: usize,
    pub prep_cost: Duration,
}

/// Long-tailed preparation cost: most samples cost about `base`, a fraction
/// `tail_fraction` cost about `base * tail_multiplier`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrepTimeModel {
    pub base: Duration,
    pub tail_fraction: f64,
    pub tail_multiplier: f64,
    pub seed: u64,
}

impl Default for PrepTimeModel {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(10),
            tail_fraction: 0.1,
            tail_multiplier: 20.0,
            seed: 0,
        }
    }
}

impl PrepTimeModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tail_fraction) {
            return Err(Error::config("tail_fraction", "must lie in [0, 1]"));
        }
        if !(self.tail_multiplier >= 1.0) {
            return Err(Error::config("tail_multiplier", "must be at least 1"));
        }
        Ok(())
    }

    /// `n` specs with costs jittered by +-20% around the two modes.
    pub fn sample_specs(&self, n: usize, crop: CropShape) -> Result<Vec<SampleSpec>> {
        self.validate()?;
        let mut rng = StdRng::seed_from_u64(self.seed);
        Ok((0..n)
            .map(|index| {
                let tail = rng.gen_bool(self.tail_fraction);
                let mult = if tail { self.tail_multiplier } else { 1.0 };
                let cost = self.base.as_secs_f64() * mult * rng.gen_range(0.8..1.2);
                SampleSpec {
                    index,
                    seq_len: rng.gen_range(crop.r / 2 + 1..=crop.r * 2),
                    msa_depth: rng.gen_range(crop.s / 2 + 1..=crop.s * 4),
                    prep_cost: Duration::from_secs_f64(cost),
                }
            })
            .collect())
    }
}

/// Shape every batch is cropped (or zero-padded) to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropShape {
    pub s: usize,
    pub r: usize,
    pub c_m: usize,
    pub c_z: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    /// `[s, r, c_m]`
    pub msa: Tensor,
    /// `[r, r, c_z]`
    pub pair: Tensor,
}

/// Synthetic featurization: deterministic per index, cropped to `crop`,
/// zero beyond the sample's own depth and length.
pub fn synthetic_batch(spec: &SampleSpec, crop: CropShape, seed: u64) -> Batch {
    let mut rng = StdRng::seed_from_u64(seed ^ (spec.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let (depth, len) = (spec.msa_depth.min(crop.s), spec.seq_len.min(crop.r));
    let msa = Tensor::from_fn(&[crop.s, crop.r, crop.c_m], |i| {
        let (s, r) = (i / (crop.r * crop.c_m), (i / crop.c_m) % crop.r);
        let v: f32 = rng.sample(rand_distr::StandardNormal);
        if s < depth && r < len {
            v
        } else {
            0.0
        }
    });
    let pair = Tensor::from_fn(&[crop.r, crop.r, crop.c_z], |i| {
        let (a, b) = (i / (crop.r * crop.c_z), (i / crop.c_z) % crop.r);
        let v: f32 = rng.sample(rand_distr::StandardNormal);
        if a < len && b < len {
            v
        } else {
            0.0
        }
    });
    Batch {
        index: spec.index,
        msa,
        pair,
    }
}

pub type PrepareFn = Arc<dyn Fn(&SampleSpec) -> Result<Batch> + Send + Sync>;

#[derive(Clone)]
pub struct PipelineConfig {
    pub n_workers: usize,
    pub mode: Mode,
    /// Width of the claim window past the lowest undelivered index.
    pub capacity: usize,
    pub cost_mode: CostMode,
    pub crop: CropShape,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchRecord {
    pub index: usize,
    pub prep_s: f64,
    pub ready_t: f64,
    pub delivered_t: f64,
    pub consumer_wait_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineStats {
    /// In delivery order.
    pub records: Vec<BatchRecord>,
    pub consumer_idle: Duration,
}

impl PipelineStats {
    pub fn delivery_order(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.index).collect()
    }

    /// Latest delivery time, measured from pipeline start.
    pub fn makespan(&self) -> f64 {
        self.records.iter().map(|r| r.delivered_t).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,prep_s,ready_t,delivered_t,consumer_wait_s\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.index, r.prep_s, r.ready_t, r.delivered_t, r.consumer_wait_s
            );
        }
        s
    }
}

pub enum Next {
    Batch(Batch),
    Exhausted,
}

struct Ready {
    batch: Batch,
    prep_s: f64,
    ready_t: f64,
}

struct State {
    next_claim: usize,
    ready: BTreeMap<usize, Ready>,
    delivered: usize,
    delivered_flags: Vec<bool>,
    /// Smallest undelivered index.
    low: usize,
    failure: Option<(usize, String)>,
    shutdown: bool,
}

struct Shared {
    specs: Vec<SampleSpec>,
    capacity: usize,
    state: Mutex<State>,
    cv: Condvar,
    start: Instant,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct PipelineHandle {
    shared: Arc<Shared>,
    mode: Mode,
    workers: Vec<JoinHandle<()>>,
    stats: PipelineStats,
}

fn spend(cost: Duration, mode: CostMode) {
    match mode {
        CostMode::Sleep => std::thread::sleep(cost),
        CostMode::Busy => {
            let t0 = Instant::now();
            while t0.elapsed() < cost {
                std::hint::spin_loop();
            }
        }
    }
}

/// Starts the worker pool with synthetic featurization.
pub fn start_pipeline(specs: Vec<SampleSpec>, cfg: &PipelineConfig) -> Result<PipelineHandle> {
    let (crop, seed) = (cfg.crop, cfg.seed);
    start_pipeline_with(specs, cfg, Arc::new(move |s: &SampleSpec| Ok(synthetic_batch(s, crop, seed))))
}

/// Starts the worker pool with a caller-supplied featurization hook. The
/// hook runs after the sample's `prep_cost` has been spent.
pub fn start_pipeline_with(specs: Vec<SampleSpec>, cfg: &PipelineConfig, prepare: PrepareFn) -> Result<PipelineHandle> {
    if cfg.n_workers == 0 {
        return Err(Error::config("workers", "must be at least 1"));
    }
    if cfg.capacity < cfg.n_workers {
        return Err(Error::config(
            "queue_capacity",
            format!("{} is below the worker count {}", cfg.capacity, cfg.n_workers),
        ));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.index != i {
            return Err(Error::config("samples", format!("index {} at position {i}", s.index)));
        }
    }
    let n = specs.len();
    let shared = Arc::new(Shared {
        specs,
        capacity: cfg.capacity,
        state: Mutex::new(State {
            next_claim: 0,
            ready: BTreeMap::new(),
            delivered: 0,
            delivered_flags: vec![false; n],
            low: 0,
            failure: None,
            shutdown: false,
        }),
        cv: Condvar::new(),
        start: Instant::now(),
    });
    let workers = (0..cfg.n_workers)
        .map(|w| {
            let shared = shared.clone();
            let prepare = prepare.clone();
            let cost_mode = cfg.cost_mode;
            std::thread::Builder::new()
                .name(format!("datapipe-{w}"))
                .spawn(move || worker(&shared, &*prepare, cost_mode))
                .map_err(Error::Io)
        })
        .collect::<Result<_>>()?;
    Ok(PipelineHandle {
        shared,
        mode: cfg.mode,
        workers,
        stats: PipelineStats::default(),
    })
}

fn worker(shared: &Shared, prepare: &(dyn Fn(&SampleSpec) -> Result<Batch> + Send + Sync), cost_mode: CostMode) {
    loop {
        let index = {
            let mut st = shared.lock();
            loop {
                if st.shutdown || st.failure.is_some() || st.next_claim >= shared.specs.len() {
                    return;
                }
                if st.next_claim < st.low + shared.capacity {
                    break;
                }
                st = shared.cv.wait(st).unwrap_or_else(|e| e.into_inner());
            }
            st.next_claim += 1;
            st.next_claim - 1
        };
        let spec = &shared.specs[index];
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| {
            spend(spec.prep_cost, cost_mode);
            prepare(spec)
        }));
        let prep_s = t0.elapsed().as_secs_f64();
        let mut st = shared.lock();
        match result {
            Ok(Ok(batch)) => {
                let ready_t = shared.start.elapsed().as_secs_f64();
                st.ready.insert(index, Ready { batch, prep_s, ready_t });
            }
            Ok(Err(e)) => {
                st.failure.get_or_insert((index, e.to_string()));
            }
            Err(p) => {
                let msg = p
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| p.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "worker panicked".into());
                st.failure.get_or_insert((index, msg));
            }
        }
        shared.cv.notify_all();
    }
}

impl PipelineHandle {
    pub fn len(&self) -> usize {
        self.shared.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.specs.is_empty()
    }

    /// Next batch per the delivery mode. Waits at most `timeout`; the time
    /// spent waiting counts as consumer idle time.
    pub fn next_batch(&mut self, timeout: Duration) -> Result<Next> {
        let t0 = Instant::now();
        let deadline = t0 + timeout;
        let mut st = self.shared.lock();
        loop {
            if let Some((index, msg)) = &st.failure {
                return Err(Error::Pipeline {
                    index: *index,
                    msg: msg.clone(),
                });
            }
            if st.delivered == self.shared.specs.len() {
                return Ok(Next::Exhausted);
            }
            let pick = match self.mode {
                Mode::Blocking => st.ready.contains_key(&st.low).then_some(st.low),
                Mode::Nonblocking => st.ready.keys().next().copied(),
            };
            if let Some(index) = pick {
                let r = st.ready.remove(&index).expect("picked from ready set");
                st.delivered += 1;
                st.delivered_flags[index] = true;
                while st.low < st.delivered_flags.len() && st.delivered_flags[st.low] {
                    st.low += 1;
                }
                drop(st);
                self.shared.cv.notify_all();
                let wait = t0.elapsed();
                self.stats.consumer_idle += wait;
                self.stats.records.push(BatchRecord {
                    index,
                    prep_s: r.prep_s,
                    ready_t: r.ready_t,
                    delivered_t: self.shared.start.elapsed().as_secs_f64(),
                    consumer_wait_s: wait.as_secs_f64(),
                });
                return Ok(Next::Batch(r.batch));
            }
            let now = Instant::now();
            if now >= deadline {
                self.stats.consumer_idle += t0.elapsed();
                return Err(Error::Timeout(timeout));
            }
            st = self
                .shared
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }
}

/// Drains the pipeline, spending `step` after each batch as a stand-in for
/// a training step.
pub fn consume(mut handle: PipelineHandle, step: Duration, timeout: Duration) -> Result<PipelineStats> {
    while let Next::Batch(_) = handle.next_batch(timeout)? {
        std::thread::sleep(step);
    }
    Ok(handle.stats().clone())
}

impl Drop for PipelineHandle {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.cv.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

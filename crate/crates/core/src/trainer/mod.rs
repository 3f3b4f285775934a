//! Training loop: recycling forward/backward under a plan cache, global
//! norm clipping, fused Adam+SWA, asynchronous evaluation and op accounting.

mod accounting;
mod eval;
mod ini;
mod plan;

pub use accounting::{categorize_ops, StepAccounting};
pub use eval::{AsyncEvaluator, EvalResult, EvalSet};
pub use plan::{PlanCache, PlanKey, PlanOutcome};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dap::{all_reduce_grads, run_ranks, scatter, Collectives, Local};
use crate::datapipe::{
    start_pipeline_with, synthetic_batch, Batch, CostMode, CropShape, Mode, Next, PipelineConfig, PipelineStats,
    PrepTimeModel, PrepareFn, SampleSpec,
};
use crate::error::{Error, Result};
use crate::evoformer::{Evoformer, Inputs, ModelConfig};
use crate::kernels::{clip_with_norm, fused_adam_swa_step, AdamSwaHyper, CacheRecord, GradBufferSet, OptimState, PackedParams};
use crate::runtime::{signature, Exec, HostJitter, PrecisionPolicy};
use crate::tensor::Precision;

pub const MAX_GLOBAL_BATCH: usize = 256;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Samples per optimizer step.
    pub global_batch: usize,
    /// Permit `global_batch` above [`MAX_GLOBAL_BATCH`].
    pub allow_large_batch: bool,
    pub dap_n: usize,
    pub n_steps: usize,
    pub precision: Precision,
    pub checkpointing: bool,
    pub plan_replay: bool,
    /// Host pause injection `(probability per eager op, pause)`.
    pub gc_pause_injection: Option<(f64, Duration)>,
    /// Steps between evaluations; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_size: usize,
    /// Minimum wall time of one evaluation.
    pub eval_cost: Duration,
    pub seed: u64,
    pub hyper: AdamSwaHyper,
    pub max_norm: f32,
    pub workers: usize,
    pub pipe_mode: Mode,
    pub prep: PrepTimeModel,
    /// Distinct training samples; batches cycle through them.
    pub dataset_size: usize,
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            global_batch: 1,
            allow_large_batch: false,
            dap_n: 1,
            n_steps: 200,
            precision: Precision::F32,
            checkpointing: false,
            plan_replay: true,
            gc_pause_injection: None,
            eval_every: 0,
            eval_size: 4,
            eval_cost: Duration::ZERO,
            seed: 0,
            hyper: AdamSwaHyper::default(),
            max_norm: 1.0,
            workers: 2,
            pipe_mode: Mode::Blocking,
            prep: PrepTimeModel {
                base: Duration::from_millis(1),
                ..PrepTimeModel::default()
            },
            dataset_size: 1,
            teacher_seed: 1_000_003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_batch == 0 {
            return Err(Error::config("global_batch", "must be at least 1"));
        }
        if self.global_batch > MAX_GLOBAL_BATCH {
            if !self.allow_large_batch {
                return Err(Error::config(
                    "global_batch",
                    format!(
                        "{} exceeds {MAX_GLOBAL_BATCH}; set allow_large_batch to override",
                        self.global_batch
                    ),
                ));
            }
            log::warn!("global_batch {} exceeds {MAX_GLOBAL_BATCH}", self.global_batch);
        }
        if self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be at least 1"));
        }
        if self.eval_every > 0 && self.eval_size == 0 {
            return Err(Error::config("eval_size", "must be at least 1 when evaluation is enabled"));
        }
        if let Some((p, _)) = self.gc_pause_injection {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("gc_pause_injection", format!("probability {p} outside [0, 1]")));
            }
        }
        self.model_config().validate()?;
        self.model.validate_dap(self.dap_n)
    }

    /// Model config with this run's precision and checkpointing applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            precision: self.precision,
            checkpointing: self.checkpointing,
            ..self.model.clone()
        }
    }

    pub fn crop(&self) -> CropShape {
        CropShape {
            s: self.model.s,
            r: self.model.r,
            c_m: self.model.c_m,
            c_z: self.model.c_z,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub loss: f32,
    pub step_time_s: f64,
    /// Cumulative plan-cache hits.
    pub capture_hits: u64,
    pub clip_scale: f32,
    pub grad_norm: f64,
    pub n_recycle: usize,
    pub outcome: PlanOutcome,
    pub accounting: StepAccounting,
    /// Latest evaluation result that arrived during this step.
    pub eval_metric: Option<f32>,
}

pub const REPORT_HEADER: &str = "step,loss,step_time_s,capture_hits,clip_scale,eval_metric";

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepReport>,
    pub pipeline: PipelineStats,
    pub evals: Vec<EvalResult>,
    pub eval_failures: Vec<String>,
    pub lag_warnings: u64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.steps {
            let eval = r.eval_metric.map(|m| format!("{m:e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:e},{:.6},{},{},{}",
                r.step, r.loss, r.step_time_s, r.capture_hits, r.clip_scale, eval
            );
        }
        s
    }
}

/// Standard deviation of step time within each recycle count, pooled over
/// counts. Capturing steps are left out.
pub fn pooled_step_time_std(steps: &[StepReport]) -> f64 {
    let mut groups: HashMap<usize, Vec<f64>> = HashMap::new();
    for s in steps.iter().filter(|s| s.outcome != PlanOutcome::Captured) {
        groups.entry(s.n_recycle).or_default().push(s.step_time_s);
    }
    let (mut ss, mut dof) = (0.0, 0usize);
    for xs in groups.values().filter(|xs| xs.len() > 1) {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        ss += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        dof += xs.len() - 1;
    }
    if dof == 0 {
        0.0
    } else {
        (ss / dof as f64).sqrt()
    }
}

struct RankState {
    exec: Exec,
    plans: PlanCache,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Evoformer,
    pub params: PackedParams,
    pub opt: OptimState,
    teacher: Evoformer,
    teacher_params: PackedParams,
    grads: GradBufferSet,
    ranks: Vec<Mutex<RankState>>,
    targets: HashMap<usize, Vec<f32>>,
    recycle_rng: StdRng,
    evaluator: Option<AsyncEvaluator>,
    pub evals: Vec<EvalResult>,
    pub eval_failures: Vec<String>,
    step: usize,
}

fn to_divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op, index } => Error::Divergence {
            step,
            msg: format!("non-finite value in {op} at index {index}"),
        },
        other => other,
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model_config();
        let (model, params) = Evoformer::new(mcfg.clone(), cfg.seed)?;
        let (teacher, teacher_params) = Evoformer::new(
            ModelConfig {
                precision: Precision::F32,
                checkpointing: false,
                ..mcfg.clone()
            },
            cfg.teacher_seed,
        )?;
        let opt = OptimState::new(&params, cfg.hyper);
        let grads = GradBufferSet::new(&params, 4);
        let ranks = (0..cfg.dap_n)
            .map(|rank| {
                let jitter = cfg
                    .gc_pause_injection
                    .map(|(p, d)| HostJitter::new(p, d, cfg.seed.wrapping_add(rank as u64 + 17)));
                let mut exec = Exec::new(PrecisionPolicy::uniform(cfg.precision)).with_jitter(jitter);
                exec.enable_trace(true);
                Mutex::new(RankState {
                    exec,
                    plans: PlanCache::new(mcfg.n_recycle_max),
                })
            })
            .collect();
        let mut t = Self {
            recycle_rng: StdRng::seed_from_u64(cfg.seed ^ 0x5eed_0f_4ec1),
            model,
            params,
            opt,
            teacher,
            teacher_params,
            grads,
            ranks,
            targets: HashMap::new(),
            evaluator: None,
            evals: Vec::new(),
            eval_failures: Vec::new(),
            step: 0,
            cfg,
        };
        if t.cfg.eval_every > 0 {
            let set = t.eval_set()?;
            let model = Evoformer::new(mcfg, t.cfg.seed)?.0;
            t.evaluator = Some(AsyncEvaluator::new(model, Arc::new(set), t.cfg.eval_cost)?);
        }
        Ok(t)
    }

    /// Applies tuned kernel configs to every rank's dispatcher.
    pub fn set_tuning(&mut self, records: &[CacheRecord]) {
        for r in &self.ranks {
            let mut st = r.lock().expect("rank state");
            for rec in records {
                st.exec.set_tuning(&rec.op_id, &rec.signature, rec.config.clone());
            }
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Plan-cache counters of rank 0: `(captures, hits)`.
    pub fn plan_counters(&self) -> (u64, u64) {
        let st = self.ranks[0].lock().expect("rank state");
        (st.plans.captures, st.plans.hits)
    }

    pub fn lag_warnings(&self) -> u64 {
        self.evaluator.as_ref().map_or(0, |e| e.lag_warnings)
    }

    /// Sample specs of the training set; batch contents depend only on these.
    pub fn dataset_specs(&self) -> Result<Vec<SampleSpec>> {
        let model = PrepTimeModel {
            seed: self.cfg.seed,
            ..self.cfg.prep.clone()
        };
        model.sample_specs(self.cfg.dataset_size, self.cfg.crop())
    }

    /// Batch for sample `id` of the training set.
    pub fn sample(&self, id: usize) -> Result<Batch> {
        let specs = self.dataset_specs()?;
        Ok(synthetic_batch(&specs[id % specs.len()], self.cfg.crop(), self.cfg.seed))
    }

    fn eval_set(&self) -> Result<EvalSet> {
        let crop = self.cfg.crop();
        let specs = PrepTimeModel {
            seed: self.cfg.seed ^ 0xe7a1,
            ..self.cfg.prep.clone()
        }
        .sample_specs(self.cfg.eval_size, crop)?;
        let mut set = EvalSet::default();
        for spec in &specs {
            let b = synthetic_batch(spec, crop, self.cfg.seed ^ 0xe7a1);
            let inputs = Inputs { msa: b.msa, pair: b.pair };
            set.targets.push(self.teacher_target(&inputs)?);
            set.inputs.push(inputs);
        }
        Ok(set)
    }

    fn teacher_target(&self, inputs: &Inputs) -> Result<Vec<f32>> {
        Ok(self.teacher.forward_local(&self.teacher_params, inputs, 1)?.features)
    }

    fn target_for(&mut self, batch: &Batch) -> Result<Vec<f32>> {
        let id = batch.index % self.cfg.dataset_size;
        if let Some(t) = self.targets.get(&id) {
            return Ok(t.clone());
        }
        let t = self.teacher_target(&Inputs {
            msa: batch.msa.clone(),
            pair: batch.pair.clone(),
        })?;
        self.targets.insert(id, t.clone());
        Ok(t)
    }

    /// Loss of the current parameters on `batch`, without gradients.
    pub fn loss_on(&mut self, batch: &Batch, n_recycle: usize) -> Result<f32> {
        let target = self.target_for(batch)?;
        let inputs = Inputs {
            msa: batch.msa.clone(),
            pair: batch.pair.clone(),
        }
        .with_precision(self.cfg.precision);
        let mut exec = Exec::new(PrecisionPolicy::uniform(self.cfg.precision));
        let out = self.model.forward(&mut exec, &Local, &self.params, &inputs, n_recycle)?;
        Ok(crate::evoformer::mse_loss(&out.features, &target)?.0)
    }

    /// Mean of [`Trainer::loss_on`] over the training set and every recycle count.
    pub fn dataset_loss(&mut self) -> Result<f32> {
        let mut total = 0.0;
        let max = self.model.cfg.n_recycle_max;
        for id in 0..self.cfg.dataset_size {
            let b = self.sample(id)?;
            for n in 1..=max {
                total += self.loss_on(&b, n)?;
            }
        }
        Ok(total / (self.cfg.dataset_size * max) as f32)
    }

    /// One optimizer step over `batches` (the global batch).
    pub fn train_step(&mut self, batches: &[Batch]) -> Result<StepReport> {
        if batches.is_empty() {
            return Err(Error::config("global_batch", "train_step needs at least one batch"));
        }
        let step = self.step;
        let n_recycle = self.recycle_rng.gen_range(1..=self.model.cfg.n_recycle_max);
        let targets = batches.iter().map(|b| self.target_for(b)).collect::<Result<Vec<_>>>()?;

        let t0 = Instant::now();
        self.grads.zero();
        let mut loss_sum = 0.0f32;
        let mut outcome = PlanOutcome::Eager;
        let mut acc = StepAccounting::default();
        for (b, target) in batches.iter().zip(&targets) {
            let inputs = Inputs {
                msa: b.msa.clone(),
                pair: b.pair.clone(),
            }
            .with_precision(self.cfg.precision);
            let key = PlanKey {
                shapes: signature(&[inputs.msa.shape(), inputs.pair.shape()]),
                n_recycle,
            };
            let (loss, o, trace) = self.forward_backward(&key, &inputs, n_recycle, target).map_err(|e| to_divergence(step, e))?;
            loss_sum += loss;
            outcome = o;
            acc.merge(&categorize_ops(&trace));
        }
        let nb = batches.len() as f32;
        if batches.len() > 1 {
            self.grads.scale(1.0 / nb);
        }
        let loss = loss_sum / nb;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {loss}"),
            });
        }
        let (clip_scale, grad_norm) = clip_with_norm(&self.grads, self.cfg.max_norm).map_err(|e| to_divergence(step, e))?;
        fused_adam_swa_step(&mut self.params, &self.grads, &mut self.opt, clip_scale)?;
        let step_time_s = t0.elapsed().as_secs_f64();

        let eval_metric = self.eval_hook(step, step_time_s)?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            step_time_s,
            capture_hits: self.plan_counters().1,
            clip_scale,
            grad_norm,
            n_recycle,
            outcome,
            accounting: acc,
            eval_metric,
        })
    }

    fn forward_backward(
        &mut self,
        key: &PlanKey,
        inputs: &Inputs,
        n_recycle: usize,
        target: &[f32],
    ) -> Result<(f32, PlanOutcome, Vec<crate::runtime::TraceEntry>)> {
        let replay = self.cfg.plan_replay;
        let model = &self.model;
        let params = &self.params;
        let n = self.cfg.dap_n;

        let run = |st: &mut RankState, comm: &dyn Collectives, inputs: &Inputs, g: &mut GradBufferSet| {
            let RankState { exec, plans } = st;
            let mut thunk =
                |e: &mut Exec| model.loss_and_grad(e, comm, params, inputs, n_recycle, target, g).map(|o| o.loss);
            let (loss, outcome) = if replay {
                plans.capture_or_replay(key, exec, thunk)?
            } else {
                (thunk(exec)?, PlanOutcome::Eager)
            };
            Ok::<_, Error>((loss, outcome, exec.take_trace()))
        };

        if n == 1 {
            let mut st = self.ranks[0].lock().expect("rank state");
            return run(&mut st, &Local, inputs, &mut self.grads);
        }

        let msa = scatter(&inputs.msa, 0, n)?;
        let pair = scatter(&inputs.pair, 0, n)?;
        let ranks = &self.ranks;
        let grads_proto = &self.grads;
        let out = run_ranks(n, self.cfg.precision, |c| {
            let r = c.rank();
            let local = Inputs {
                msa: msa[r].local.clone(),
                pair: pair[r].local.clone(),
            };
            let mut g = grads_proto.clone();
            g.zero();
            let mut st = ranks[r].lock().expect("rank state");
            let (loss, outcome, trace) = run(&mut st, c, &local, &mut g)?;
            all_reduce_grads(c, &mut g)?;
            Ok((loss, outcome, trace, if r == 0 { Some(g) } else { None }))
        })?;
        let mut it = out.into_iter();
        let ((loss, outcome, trace, g), _) = it.next().expect("rank 0");
        let g = g.expect("rank 0 returns gradients");
        let mut sum = self.grads.flat();
        for (a, b) in sum.iter_mut().zip(g.flat()) {
            *a += b;
        }
        self.grads.copy_from_flat(&sum)?;
        Ok((loss, outcome, trace))
    }

    fn eval_hook(&mut self, step: usize, step_time_s: f64) -> Result<Option<f32>> {
        let every = self.cfg.eval_every;
        let Some(ev) = self.evaluator.as_mut() else {
            return Ok(None);
        };
        if (step + 1) % every == 0 {
            let snapshot = self.params.with_values(self.opt.swa.clone())?;
            ev.submit(step, snapshot, step_time_s * every as f64)?;
        }
        let results = ev.poll();
        Ok(self.absorb(results))
    }

    fn absorb(&mut self, results: Vec<Result<EvalResult>>) -> Option<f32> {
        let mut latest = None;
        for r in results {
            match r {
                Ok(r) => {
                    latest = Some(r.metric);
                    self.evals.push(r);
                }
                Err(e) => {
                    log::warn!("{e}");
                    self.eval_failures.push(e.to_string());
                }
            }
        }
        latest
    }

    /// Waits for outstanding evaluations.
    pub fn finish_evals(&mut self) -> Option<f32> {
        let results = self.evaluator.as_mut().map(|e| e.drain()).unwrap_or_default();
        self.absorb(results)
    }

    /// Runs `n_steps` steps fed by the data pipeline.
    pub fn run(&mut self) -> Result<TrainReport> {
        let crop = self.cfg.crop();
        let total = self.cfg.n_steps * self.cfg.global_batch;
        let dataset = Arc::new(self.dataset_specs()?);
        let costs = PrepTimeModel {
            seed: self.cfg.seed.wrapping_add(1),
            ..self.cfg.prep.clone()
        }
        .sample_specs(total, crop)?;
        let seed = self.cfg.seed;
        let prepare: PrepareFn = Arc::new(move |s: &SampleSpec| {
            let mut b = synthetic_batch(&dataset[s.index % dataset.len()], crop, seed);
            b.index = s.index;
            Ok(b)
        });
        let pcfg = PipelineConfig {
            n_workers: self.cfg.workers,
            mode: self.cfg.pipe_mode,
            capacity: self.cfg.workers.max(1) + 2,
            cost_mode: CostMode::Sleep,
            crop,
            seed,
        };
        let mut pipe = start_pipeline_with(costs, &pcfg, prepare)?;
        let mut report = TrainReport::default();
        let mut pending = Vec::with_capacity(self.cfg.global_batch);
        loop {
            match pipe.next_batch(Duration::from_secs(60))? {
                Next::Batch(b) => {
                    pending.push(b);
                    if pending.len() == self.cfg.global_batch {
                        let r = self.train_step(&pending)?;
                        log::debug!("step {} loss {:.4e} ({:.3}s)", r.step, r.loss, r.step_time_s);
                        report.steps.push(r);
                        pending.clear();
                    }
                }
                Next::Exhausted => break,
            }
        }
        if let Some(m) = self.finish_evals() {
            if let Some(last) = report.steps.last_mut() {
                last.eval_metric = last.eval_metric.or(Some(m));
            }
        }
        report.pipeline = pipe.stats().clone();
        report.evals = self.evals.clone();
        report.eval_failures = self.eval_failures.clone();
        report.lag_warnings = self.lag_warnings();
        Ok(report)
    }
}

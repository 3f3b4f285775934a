//! Factor breakdown, efficiency curves from benchmarks, time-to-train and
//! calibration against observed speedups.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::model::{CommModel, EfficiencyCurve, StepModel, StragglerModel};
use super::sim::{dap_speedup, ns_to_s, simulate, SimConfig};
use crate::config::Ini;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Factor {
    HostOverhead,
    SerialModules,
    ImbalancedComm,
    KernelScalability,
    CommOverhead,
}

impl Factor {
    pub const ALL: [Factor; 5] = [
        Factor::HostOverhead,
        Factor::SerialModules,
        Factor::ImbalancedComm,
        Factor::KernelScalability,
        Factor::CommOverhead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Factor::HostOverhead => "host_overhead",
            Factor::SerialModules => "serial_modules",
            Factor::ImbalancedComm => "imbalanced_comm",
            Factor::KernelScalability => "kernel_scalability",
            Factor::CommOverhead => "comm_overhead",
        }
    }

    /// The model with this factor made ideal.
    fn idealize(self, step: &mut StepModel, stragglers: &mut StragglerModel) {
        match self {
            Factor::HostOverhead => step.host_overhead_s = 0.0,
            Factor::SerialModules => step.serial_s = 0.0,
            Factor::ImbalancedComm => *stragglers = StragglerModel::none(),
            Factor::KernelScalability => step.efficiency = EfficiencyCurve::ideal(),
            Factor::CommOverhead => {
                step.dap_comm = CommModel::FREE;
                step.dp_comm = CommModel::FREE;
            }
        }
    }
}

/// Totals are summed over every simulated step, in nanoseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownReport {
    pub n_steps: usize,
    pub measured_ns: i128,
    pub optimal_ns: i128,
    pub components_ns: BTreeMap<Factor, i128>,
    /// Interaction term: gap minus the sum of components.
    pub residual_ns: i128,
}

impl BreakdownReport {
    pub fn gap_ns(&self) -> i128 {
        self.measured_ns - self.optimal_ns
    }

    fn per_step(&self, ns: i128) -> f64 {
        ns_to_s(ns) / self.n_steps.max(1) as f64
    }

    pub fn measured_step_s(&self) -> f64 {
        self.per_step(self.measured_ns)
    }

    pub fn optimal_step_s(&self) -> f64 {
        self.per_step(self.optimal_ns)
    }

    pub fn component_s(&self, f: Factor) -> f64 {
        self.per_step(self.components_ns[&f])
    }

    pub fn residual_s(&self) -> f64 {
        self.per_step(self.residual_ns)
    }

    /// `factor,seconds,share`, one row per factor plus the residual; shares
    /// are fractions of the gap.
    pub fn to_csv(&self) -> String {
        let gap = self.gap_ns();
        let share = |ns: i128| if gap == 0 { 0.0 } else { ns as f64 / gap as f64 };
        let mut s = String::from("factor,seconds,share\n");
        for (f, &ns) in &self.components_ns {
            let _ = writeln!(s, "{},{:.9},{:.6}", f.as_str(), self.per_step(ns), share(ns));
        }
        let _ = writeln!(s, "residual,{:.9},{:.6}", self.residual_s(), share(self.residual_ns));
        s
    }
}

/// Ablates each factor in turn against the same seed. The optimum has all
/// factors ideal at once.
pub fn breakdown(step: &StepModel, stragglers: &StragglerModel, cfg: &SimConfig) -> Result<BreakdownReport> {
    let cfg = SimConfig {
        sync_insertion: false,
        record_trace: false,
        ..*cfg
    };
    let total = |s: &StepModel, st: &StragglerModel| -> Result<i128> { Ok(simulate(s, st, &cfg)?.total_ns() as i128) };
    let measured = total(step, stragglers)?;
    let (mut opt_step, mut opt_st) = (step.clone(), stragglers.clone());
    let mut components = BTreeMap::new();
    for f in Factor::ALL {
        let (mut s, mut st) = (step.clone(), stragglers.clone());
        f.idealize(&mut s, &mut st);
        f.idealize(&mut opt_step, &mut opt_st);
        components.insert(f, measured - total(&s, &st)?);
    }
    let optimal = total(&opt_step, &opt_st)?;
    let residual = (measured - optimal) - components.values().sum::<i128>();
    Ok(BreakdownReport {
        n_steps: cfg.n_steps,
        measured_ns: measured,
        optimal_ns: optimal,
        components_ns: components,
        residual_ns: residual,
    })
}

/// Closed-form Amdahl speedup for serial share `s` on `n` workers.
pub fn amdahl_speedup(serial_share: f64, n: usize) -> f64 {
    1.0 / (serial_share + (1.0 - serial_share) / n as f64)
}

/// Elements in a workload signature such as `8x16;4x4`.
fn workload(signature: &str) -> Option<u64> {
    signature
        .split(';')
        .map(|shape| shape.split('x').map(|d| d.trim().parse::<u64>().ok()).product::<Option<u64>>())
        .sum()
}

/// `e(n) = t(W) / (n t(W/n))` per op from a bench CSV
/// (`op,signature,config,median_s,...`), weighted across ops by their share
/// of time at the largest size `W`.
pub fn kernel_efficiency_from_bench(csv: &str) -> Result<EfficiencyCurve> {
    let mut lines = csv.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        location: "bench csv".into(),
        msg: "empty".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Parse {
            location: "bench csv header".into(),
            msg: format!("missing column `{name}`"),
        })
    };
    let (c_op, c_sig, c_t) = (col("op")?, col("signature")?, col("median_s")?);
    let mut per_op: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Parse {
            location: format!("bench csv line {}", i + 1),
            msg: format!("bad row `{line}`"),
        };
        let op = f.get(c_op).ok_or_else(bad)?;
        let w = f.get(c_sig).and_then(|s| workload(s)).ok_or_else(bad)?;
        let t: f64 = f.get(c_t).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if !(t > 0.0) {
            return Err(bad());
        }
        per_op.entry(op.to_string()).or_default().insert(w, t);
    }
    let mut weighted: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for sizes in per_op.values() {
        let Some((&w, &tw)) = sizes.iter().next_back() else {
            continue;
        };
        for n in [2u64, 4, 8] {
            if w % n != 0 {
                continue;
            }
            if let Some(&tn) = sizes.get(&(w / n)) {
                let e = tw / (n as f64 * tn);
                let acc = weighted.entry(n as usize).or_default();
                acc.0 += tw * e;
                acc.1 += tw;
            }
        }
    }
    EfficiencyCurve::new(weighted.into_iter().map(|(n, (num, den))| (n, num / den)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Inline,
    Async,
}

/// Wall hours to train `n_steps`, with an evaluation every `eval_every`
/// steps costing `eval_s`, plus one-off `init_s`.
pub fn time_to_train_model(
    step_time_s: f64,
    n_steps: usize,
    eval_mode: EvalMode,
    eval_every: usize,
    eval_s: f64,
    init_s: f64,
) -> f64 {
    let train = step_time_s * n_steps as f64;
    let evals = if eval_every == 0 { 0 } else { n_steps / eval_every } as f64;
    let eval = match eval_mode {
        EvalMode::Inline => evals * eval_s,
        EvalMode::Async => evals * (eval_s - eval_every as f64 * step_time_s).max(0.0),
    };
    (init_s + train + eval) / 3600.0
}

/// Observed speedup targets with the data-parallel degree they refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub dp: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// `(dap_n, speedup)`
    pub targets: Vec<(usize, f64)>,
}

impl Calibration {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        const S: &str = "calibration";
        ini.reject_unknown(S, &["dp", "steps", "seed", "targets"])?;
        let mut targets = Vec::new();
        for item in ini.raw(S, "targets").unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let p = item
                .split_once(':')
                .and_then(|(n, v)| Some((n.trim().parse().ok()?, v.trim().parse().ok()?)));
            targets.push(p.ok_or_else(|| Error::config("calibration.targets", format!("bad entry `{item}`")))?);
        }
        Ok(Self {
            dp: ini.require(S, "dp")?,
            n_steps: ini.get_or(S, "steps", 200)?,
            seed: ini.get_or(S, "seed", 0)?,
            targets,
        })
    }

    /// Simulated speedups for each target's DAP degree.
    pub fn speedups(&self, step: &StepModel, stragglers: &StragglerModel) -> Result<Vec<(usize, f64)>> {
        self.targets
            .iter()
            .map(|&(n, _)| Ok((n, dap_speedup(step, stragglers, self.dp, n, self.n_steps, self.seed)?)))
            .collect()
    }

    /// Largest absolute deviation from the targets.
    pub fn error(&self, step: &StepModel, stragglers: &StragglerModel) -> Result<f64> {
        Ok(self
            .speedups(step, stragglers)?
            .iter()
            .zip(&self.targets)
            .map(|((_, got), (_, want))| (got - want).abs())
            .fold(0.0, f64::max))
    }
}

/// Coarse grid over serial share, per-collective latency and straggler mean
/// with the remaining model fixed. Returns the best point and its error.
pub fn calibrate(
    base: &StepModel,
    stragglers: &StragglerModel,
    cal: &Calibration,
    serial_s: &[f64],
    dap_latency_s: &[f64],
    exp_mean_s: &[f64],
) -> Result<(StepModel, StragglerModel, f64)> {
    let mut best: Option<(StepModel, StragglerModel, f64)> = None;
    for &s in serial_s {
        for &lat in dap_latency_s {
            for &mu in exp_mean_s {
                let step = StepModel {
                    serial_s: s,
                    dap_comm: CommModel {
                        latency_s: lat,
                        ..base.dap_comm
                    },
                    ..base.clone()
                };
                let st = StragglerModel {
                    exp_mean_s: mu,
                    ..stragglers.clone()
                };
                let err = cal.error(&step, &st)?;
                if best.as_ref().map_or(true, |b| err < b.2) {
                    best = Some((step, st, err));
                }
            }
        }
    }
    best.ok_or_else(|| Error::config("calibration", "empty search grid"))
}

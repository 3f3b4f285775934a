//! Bulk-synchronous event simulation in integer nanoseconds.

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::model::{StepModel, StragglerModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub n_ranks: usize,
    pub dap_n: usize,
    pub n_steps: usize,
    /// Barrier before every collective.
    pub sync_insertion: bool,
    pub seed: u64,
    /// Keep per-rank events in [`SimResult::trace`].
    pub record_trace: bool,
}

impl SimConfig {
    pub fn new(n_ranks: usize, dap_n: usize, n_steps: usize) -> Self {
        Self {
            n_ranks,
            dap_n,
            n_steps,
            sync_insertion: false,
            seed: 0,
            record_trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dap_n == 0 {
            return Err(Error::config("dap", "must be at least 1"));
        }
        if self.n_ranks == 0 || self.n_ranks % self.dap_n != 0 {
            return Err(Error::config(
                "ranks",
                format!("{} ranks do not split into DAP-{} islands", self.n_ranks, self.dap_n),
            ));
        }
        Ok(())
    }
}

pub fn to_ns(s: f64) -> u64 {
    (s * 1e9).round() as u64
}

pub fn ns_to_s(ns: impl Into<i128>) -> f64 {
    ns.into() as f64 / 1e9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Compute,
    Dap(usize),
    Grad,
}

impl EventKind {
    fn label(self) -> String {
        match self {
            EventKind::Compute => "compute".into(),
            EventKind::Dap(i) => format!("dap{i}"),
            EventKind::Grad => "grad".into(),
        }
    }
}

/// One rank's interval: compute start/end, or collective arrival/release.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankEvent {
    pub step: usize,
    pub rank: usize,
    pub kind: EventKind,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RankTrace {
    pub events: Vec<RankEvent>,
}

impl RankTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,rank,event,start_s,end_s\n");
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{:.9}",
                e.step,
                e.rank,
                e.kind.label(),
                ns_to_s(e.start_ns),
                ns_to_s(e.end_ns)
            );
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct SimResult {
    pub step_ns: Vec<u64>,
    /// Per step, collective time summed over ranks: release minus arrival
    /// without sync insertion, release minus barrier with it.
    pub comm_ns: Vec<u64>,
    pub n_ranks: usize,
    pub trace: Option<RankTrace>,
}

impl SimResult {
    pub fn total_ns(&self) -> u64 {
        self.step_ns.iter().sum()
    }

    pub fn mean_step_s(&self) -> f64 {
        ns_to_s(self.total_ns()) / self.step_ns.len().max(1) as f64
    }

    /// Collective time per rank per step.
    pub fn mean_comm_s(&self) -> f64 {
        let total: u64 = self.comm_ns.iter().sum();
        ns_to_s(total) / (self.comm_ns.len().max(1) * self.n_ranks.max(1)) as f64
    }
}

fn draw_delays(st: &StragglerModel, n: usize, rng: &mut StdRng, out: &mut [u64]) {
    for (r, d) in out.iter_mut().enumerate().take(n) {
        let mut s = 0.0;
        // uniform draws compared against parameters keep delays monotone in them
        let u: f64 = rng.gen();
        if u < st.p_slow {
            s += st.slow_extra_s;
        }
        let u: f64 = rng.gen();
        if r < st.exp_ranks {
            s += -st.exp_mean_s * (1.0 - u).ln();
        }
        if !st.pipeline_waits.is_empty() {
            s += st.pipeline_waits[rng.gen_range(0..st.pipeline_waits.len())];
        }
        for &(fr, fd) in &st.fixed {
            if fr == r {
                s += fd;
            }
        }
        *d = to_ns(s);
    }
}

/// Runs `cfg.n_steps` synchronous steps. Each rank computes, with its
/// straggler delay in the first segment, then meets its DAP island at every
/// DAP collective and all ranks at the gradient all-reduce.
pub fn simulate(step: &StepModel, stragglers: &StragglerModel, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    step.validate()?;
    stragglers.validate()?;
    let n = cfg.n_ranks;
    let dap = cfg.dap_n;
    let k = if dap > 1 { step.dap_collectives } else { 0 };
    let compute = to_ns(step.host_overhead_s) + to_ns(step.serial_s)
        + to_ns(step.parallel_compute_s / (dap as f64 * step.efficiency.at(dap)));
    let segs = k as u64 + 1;
    let seg: Vec<u64> = (0..segs).map(|i| compute / segs + u64::from(i < compute % segs)).collect();
    let dap_ns = to_ns(step.dap_collective_s(dap));
    let grad_ns = to_ns(step.grad_allreduce_s(n));

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut delay = vec![0u64; n];
    let mut t = vec![0u64; n];
    let mut trace = cfg.record_trace.then(RankTrace::default);
    let mut res = SimResult {
        step_ns: Vec::with_capacity(cfg.n_steps),
        comm_ns: Vec::with_capacity(cfg.n_steps),
        n_ranks: n,
        trace: None,
    };
    let mut clock = 0u64;
    for s in 0..cfg.n_steps {
        draw_delays(stragglers, n, &mut rng, &mut delay);
        let mut comm = 0u64;
        for r in 0..n {
            t[r] = clock + seg[0] + delay[r];
            if let Some(tr) = trace.as_mut() {
                tr.events.push(RankEvent {
                    step: s,
                    rank: r,
                    kind: EventKind::Compute,
                    start_ns: clock,
                    end_ns: t[r],
                });
            }
        }
        let mut collective = |t: &mut [u64], group: std::ops::Range<usize>, cost: u64, kind: EventKind, next: u64| {
            let arrive_max = t[group.clone()].iter().copied().max().unwrap_or(0);
            let release = arrive_max + cost;
            for r in group {
                let start = if cfg.sync_insertion { arrive_max } else { t[r] };
                comm += release - start;
                if let Some(tr) = trace.as_mut() {
                    tr.events.push(RankEvent {
                        step: s,
                        rank: r,
                        kind,
                        start_ns: t[r],
                        end_ns: release,
                    });
                }
                t[r] = release + next;
            }
        };
        for i in 0..k {
            for island in 0..n / dap {
                collective(&mut t, island * dap..(island + 1) * dap, dap_ns, EventKind::Dap(i), seg[i + 1]);
            }
        }
        if n > 1 {
            collective(&mut t, 0..n, grad_ns, EventKind::Grad, 0);
        }
        let end = t.iter().copied().max().unwrap_or(clock);
        res.step_ns.push(end - clock);
        res.comm_ns.push(comm);
        clock = end;
    }
    res.trace = trace;
    Ok(res)
}

/// Collective time lost to waiting for slower ranks, per rank per step.
pub fn estimate_imbalance(nosync: &SimResult, sync: &SimResult) -> f64 {
    (nosync.mean_comm_s() - sync.mean_comm_s()).max(0.0)
}

/// Mean step time at DAP-1 over mean step time at DAP-`dap_n`, with the
/// data-parallel degree held at `dp`.
pub fn dap_speedup(
    step: &StepModel,
    stragglers: &StragglerModel,
    dp: usize,
    dap_n: usize,
    n_steps: usize,
    seed: u64,
) -> Result<f64> {
    let base = SimConfig {
        seed,
        ..SimConfig::new(dp, 1, n_steps)
    };
    let one = simulate(step, stragglers, &base)?;
    let many = simulate(
        step,
        stragglers,
        &SimConfig {
            n_ranks: dp * dap_n,
            dap_n,
            ..base
        },
    )?;
    Ok(one.mean_step_s() / many.mean_step_s())
}

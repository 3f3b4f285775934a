//! Step cost model, straggler model and their text-config form.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Ini;
use crate::error::{Error, Result};

/// Latency plus bytes over bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommModel {
    pub latency_s: f64,
    /// Bytes per second; infinite means transfer is free.
    pub bandwidth_bps: f64,
}

impl CommModel {
    pub const FREE: CommModel = CommModel {
        latency_s: 0.0,
        bandwidth_bps: f64::INFINITY,
    };

    pub fn time_s(&self, bytes: f64) -> f64 {
        if bytes <= 0.0 {
            return 0.0;
        }
        self.latency_s + bytes / self.bandwidth_bps
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::config(format!("{name}_latency_s"), "must be finite and >= 0"));
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::config(format!("{name}_bandwidth_bps"), "must be > 0"));
        }
        Ok(())
    }
}

/// Kernel efficiency `e(n)` with `e(1) = 1`; linear between measured
/// points, flat beyond them.
#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyCurve {
    points: BTreeMap<usize, f64>,
}

impl Default for EfficiencyCurve {
    fn default() -> Self {
        Self::ideal()
    }
}

impl EfficiencyCurve {
    pub fn ideal() -> Self {
        Self {
            points: BTreeMap::from([(1, 1.0)]),
        }
    }

    pub fn new(points: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut map = BTreeMap::from([(1, 1.0)]);
        for (n, e) in points {
            if n == 0 || !(e > 0.0 && e.is_finite()) {
                return Err(Error::config("efficiency", format!("invalid point {n}:{e}")));
            }
            if n == 1 && e != 1.0 {
                return Err(Error::config("efficiency", "e(1) must be 1"));
            }
            map.insert(n, e);
        }
        Ok(Self { points: map })
    }

    pub fn at(&self, n: usize) -> f64 {
        if let Some(&e) = self.points.get(&n) {
            return e;
        }
        let below = self.points.range(..n).next_back();
        let above = self.points.range(n..).next();
        match (below, above) {
            (Some((&a, &ea)), Some((&b, &eb))) => ea + (eb - ea) * (n - a) as f64 / (b - a) as f64,
            (Some((_, &e)), None) | (None, Some((_, &e))) => e,
            (None, None) => 1.0,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.points.iter().map(|(&n, &e)| (n, e))
    }

    /// `n:e` pairs, comma separated.
    pub fn parse(s: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parsed = item
                .split_once(':')
                .and_then(|(n, e)| Some((n.trim().parse().ok()?, e.trim().parse().ok()?)));
            pts.push(parsed.ok_or_else(|| Error::config("efficiency", format!("bad point `{item}`")))?);
        }
        Self::new(pts)
    }

    pub fn to_text(&self) -> String {
        self.points().map(|(n, e)| format!("{n}:{e}")).collect::<Vec<_>>().join(", ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepModel {
    /// DAP-divisible work at n = 1.
    pub parallel_compute_s: f64,
    pub serial_s: f64,
    pub host_overhead_s: f64,
    /// DAP collectives per step.
    pub dap_collectives: usize,
    /// Global tensor bytes moved by one DAP collective.
    pub dap_bytes: f64,
    pub dap_comm: CommModel,
    /// Gradient bytes all-reduced once per step across every rank.
    pub grad_bytes: f64,
    pub dp_comm: CommModel,
    pub efficiency: EfficiencyCurve,
}

impl Default for StepModel {
    fn default() -> Self {
        Self {
            parallel_compute_s: 1.0,
            serial_s: 0.0,
            host_overhead_s: 0.0,
            dap_collectives: 0,
            dap_bytes: 0.0,
            dap_comm: CommModel::FREE,
            grad_bytes: 0.0,
            dp_comm: CommModel::FREE,
            efficiency: EfficiencyCurve::ideal(),
        }
    }
}

fn nonneg(v: f64, key: &str) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and >= 0, got {v}")))
    }
}

impl StepModel {
    pub fn validate(&self) -> Result<()> {
        nonneg(self.parallel_compute_s, "parallel_compute_s")?;
        nonneg(self.serial_s, "serial_s")?;
        nonneg(self.host_overhead_s, "host_overhead_s")?;
        nonneg(self.dap_bytes, "dap_bytes")?;
        nonneg(self.grad_bytes, "grad_bytes")?;
        self.dap_comm.validate("dap")?;
        self.dp_comm.validate("dp")
    }

    /// Per-rank compute seconds at DAP degree `n`.
    pub fn compute_s(&self, n: usize) -> f64 {
        self.host_overhead_s + self.serial_s + self.parallel_compute_s / (n as f64 * self.efficiency.at(n))
    }

    /// One DAP collective at degree `n`.
    pub fn dap_collective_s(&self, n: usize) -> f64 {
        if n <= 1 {
            return 0.0;
        }
        self.dap_comm.time_s(self.dap_bytes * (n - 1) as f64 / n as f64)
    }

    /// Gradient all-reduce over `ranks` ranks.
    pub fn grad_allreduce_s(&self, ranks: usize) -> f64 {
        if ranks <= 1 {
            return 0.0;
        }
        self.dp_comm
            .time_s(2.0 * self.grad_bytes * (ranks - 1) as f64 / ranks as f64)
    }

    pub const KEYS: &'static [&'static str] = &[
        "parallel_compute_s",
        "serial_s",
        "host_overhead_s",
        "dap_collectives",
        "dap_bytes",
        "dap_latency_s",
        "dap_bandwidth_bps",
        "grad_bytes",
        "dp_latency_s",
        "dp_bandwidth_bps",
        "efficiency",
    ];

    /// Reads section `[step]`; absent keys keep their defaults.
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        const S: &str = "step";
        ini.reject_unknown(S, Self::KEYS)?;
        let d = Self::default();
        let m = Self {
            parallel_compute_s: ini.get_or(S, "parallel_compute_s", d.parallel_compute_s)?,
            serial_s: ini.get_or(S, "serial_s", d.serial_s)?,
            host_overhead_s: ini.get_or(S, "host_overhead_s", d.host_overhead_s)?,
            dap_collectives: ini.get_or(S, "dap_collectives", d.dap_collectives)?,
            dap_bytes: ini.get_or(S, "dap_bytes", d.dap_bytes)?,
            dap_comm: CommModel {
                latency_s: ini.get_or(S, "dap_latency_s", 0.0)?,
                bandwidth_bps: ini.get_or(S, "dap_bandwidth_bps", f64::INFINITY)?,
            },
            grad_bytes: ini.get_or(S, "grad_bytes", d.grad_bytes)?,
            dp_comm: CommModel {
                latency_s: ini.get_or(S, "dp_latency_s", 0.0)?,
                bandwidth_bps: ini.get_or(S, "dp_bandwidth_bps", f64::INFINITY)?,
            },
            efficiency: match ini.raw(S, "efficiency") {
                Some(s) => EfficiencyCurve::parse(s).map_err(|e| Error::config("step.efficiency", e.to_string()))?,
                None => EfficiencyCurve::ideal(),
            },
        };
        m.validate().map_err(|e| match e {
            Error::Config { key, msg } => Error::config(format!("step.{key}"), msg),
            other => other,
        })?;
        Ok(m)
    }

    pub fn write_ini(&self, ini: &mut Ini) {
        const S: &str = "step";
        ini.set(S, "parallel_compute_s", self.parallel_compute_s);
        ini.set(S, "serial_s", self.serial_s);
        ini.set(S, "host_overhead_s", self.host_overhead_s);
        ini.set(S, "dap_collectives", self.dap_collectives);
        ini.set(S, "dap_bytes", self.dap_bytes);
        ini.set(S, "dap_latency_s", self.dap_comm.latency_s);
        ini.set(S, "dap_bandwidth_bps", self.dap_comm.bandwidth_bps);
        ini.set(S, "grad_bytes", self.grad_bytes);
        ini.set(S, "dp_latency_s", self.dp_comm.latency_s);
        ini.set(S, "dp_bandwidth_bps", self.dp_comm.bandwidth_bps);
        ini.set(S, "efficiency", self.efficiency.to_text());
    }
}

/// Extra per-rank, per-step delay before the first collective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StragglerModel {
    /// Every rank is slow with this probability...
    pub p_slow: f64,
    /// ...by this much.
    pub slow_extra_s: f64,
    /// Exponential delay with this mean on the first `exp_ranks` ranks.
    pub exp_mean_s: f64,
    pub exp_ranks: usize,
    /// Constant delay on specific ranks.
    pub fixed: Vec<(usize, f64)>,
    /// Empirical data-pipeline waits; each rank draws one per step.
    pub pipeline_waits: Vec<f64>,
}

impl StragglerModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_off(&self) -> bool {
        (self.p_slow == 0.0 || self.slow_extra_s == 0.0)
            && (self.exp_mean_s == 0.0 || self.exp_ranks == 0)
            && self.fixed.iter().all(|&(_, d)| d == 0.0)
            && self.pipeline_waits.iter().all(|&w| w == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_slow) {
            return Err(Error::config("p_slow", "must lie in [0, 1]"));
        }
        nonneg(self.slow_extra_s, "slow_extra_s")?;
        nonneg(self.exp_mean_s, "exp_mean_s")?;
        for &(_, d) in &self.fixed {
            nonneg(d, "fixed")?;
        }
        for &w in &self.pipeline_waits {
            nonneg(w, "pipeline_waits")?;
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] =
        &["p_slow", "slow_extra_s", "exp_mean_s", "exp_ranks", "fixed", "pipeline_csv"];

    /// Reads section `[straggler]`. `pipeline_csv` is resolved against `base`.
    pub fn from_ini(ini: &Ini, base: Option<&Path>) -> Result<Self> {
        const S: &str = "straggler";
        ini.reject_unknown(S, Self::KEYS)?;
        let mut fixed = Vec::new();
        if let Some(s) = ini.raw(S, "fixed") {
            for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let p = item
                    .split_once(':')
                    .and_then(|(r, d)| Some((r.trim().parse().ok()?, d.trim().parse().ok()?)));
                fixed.push(p.ok_or_else(|| Error::config("straggler.fixed", format!("bad entry `{item}`")))?);
            }
        }
        let pipeline_waits = match ini.raw(S, "pipeline_csv") {
            Some(p) => {
                let path = base.map_or_else(|| Path::new(p).to_path_buf(), |b| b.join(p));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::config("straggler.pipeline_csv", format!("{}: {e}", path.display())))?;
                pipeline_waits_from_csv(&text)?
            }
            None => Vec::new(),
        };
        let m = Self {
            p_slow: ini.get_or(S, "p_slow", 0.0)?,
            slow_extra_s: ini.get_or(S, "slow_extra_s", 0.0)?,
            exp_mean_s: ini.get_or(S, "exp_mean_s", 0.0)?,
            exp_ranks: ini.get_or(S, "exp_ranks", 0)?,
            fixed,
            pipeline_waits,
        };
        m.validate().map_err(|e| match e {
            Error::Config { key, msg } => Error::config(format!("straggler.{key}"), msg),
            other => other,
        })?;
        Ok(m)
    }

    pub fn write_ini(&self, ini: &mut Ini) {
        const S: &str = "straggler";
        ini.set(S, "p_slow", self.p_slow);
        ini.set(S, "slow_extra_s", self.slow_extra_s);
        ini.set(S, "exp_mean_s", self.exp_mean_s);
        ini.set(S, "exp_ranks", self.exp_ranks);
        if !self.fixed.is_empty() {
            let s: Vec<String> = self.fixed.iter().map(|(r, d)| format!("{r}:{d}")).collect();
            ini.set(S, "fixed", s.join(", "));
        }
    }
}

/// `consumer_wait_s` column of a pipeline stats CSV.
pub fn pipeline_waits_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        location: "pipeline csv".into(),
        msg: "empty file".into(),
    })?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "consumer_wait_s")
        .ok_or_else(|| Error::Parse {
            location: "pipeline csv header".into(),
            msg: "no consumer_wait_s column".into(),
        })?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    location: format!("pipeline csv line {}", i + 2),
                    msg: format!("bad row `{l}`"),
                })
        })
        .collect()
}

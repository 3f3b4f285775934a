//! Exhaustive kernel-configuration search with a persistent cache.
//!
//! Each candidate is first checked against an oracle output; a candidate that
//! panics, errors or disagrees is disqualified. Survivors are timed with a
//! monotonic clock after warmup, and the configuration with the lowest median
//! wins. Results are cached per (op, workload signature, machine).

use std::fmt;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};

pub const CACHE_DIR_ENV: &str = "FOLDSCALE_CACHE_DIR";
pub const CACHE_FILE: &str = "autotune.cache";

/// Tunable launch parameters. Unset fields do not apply to the op.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct KernelConfig {
    pub tile_q: Option<usize>,
    pub tile_k: Option<usize>,
    pub rows_per_block: Option<usize>,
    pub split: Option<usize>,
}

impl KernelConfig {
    pub fn tiles(tile_q: usize, tile_k: usize) -> Self {
        Self {
            tile_q: Some(tile_q),
            tile_k: Some(tile_k),
            ..Default::default()
        }
    }

    pub fn rows(rows_per_block: usize) -> Self {
        Self {
            rows_per_block: Some(rows_per_block),
            ..Default::default()
        }
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (k, v) in [
            ("tile_q", self.tile_q),
            ("tile_k", self.tile_k),
            ("rows_per_block", self.rows_per_block),
            ("split", self.split),
        ] {
            if let Some(v) = v {
                parts.push(format!("{k}={v}"));
            }
        }
        if parts.is_empty() {
            write!(f, "default")
        } else {
            write!(f, "{}", parts.join(";"))
        }
    }
}

impl FromStr for KernelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = KernelConfig::default();
        if s.trim() == "default" {
            return Ok(cfg);
        }
        for part in s.split(';').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
                location: s.to_string(),
                msg: format!("expected key=value, got `{part}`"),
            })?;
            let v: usize = v.trim().parse().map_err(|_| Error::Parse {
                location: s.to_string(),
                msg: format!("`{v}` is not an integer"),
            })?;
            match k.trim() {
                "tile_q" => cfg.tile_q = Some(v),
                "tile_k" => cfg.tile_k = Some(v),
                "rows_per_block" => cfg.rows_per_block = Some(v),
                "split" => cfg.split = Some(v),
                other => {
                    return Err(Error::Parse {
                        location: s.to_string(),
                        msg: format!("unknown config key `{other}`"),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

/// CPU model string plus logical core count.
pub fn machine_fingerprint() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{model} x{cores}").replace('|', "/")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub op_id: String,
    pub signature: String,
    pub config: KernelConfig,
    pub median_s: f64,
    pub fingerprint: String,
}

impl CacheRecord {
    fn to_line(&self) -> String {
        format!(
            "{} | {} | {} | {:e} | {}",
            self.op_id, self.signature, self.config, self.median_s, self.fingerprint
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(" | ").collect();
        let err = |msg: String| Error::Parse {
            location: format!("autotune cache line {lineno}"),
            msg,
        };
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        Ok(Self {
            op_id: fields[0].trim().to_string(),
            signature: fields[1].trim().to_string(),
            config: fields[2].trim().parse()?,
            median_s: fields[3]
                .trim()
                .parse()
                .map_err(|_| err(format!("bad median `{}`", fields[3])))?,
            fingerprint: fields[4].trim().to_string(),
        })
    }
}

/// Line-oriented cache file, one [`CacheRecord`] per line.
#[derive(Clone, Debug, Default)]
pub struct TuneCache {
    path: Option<PathBuf>,
    records: Vec<CacheRecord>,
}

impl TuneCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or prepares to create) the cache file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut records = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                records.push(CacheRecord::parse(line, i + 1)?);
            }
        }
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    /// Cache in `$FOLDSCALE_CACHE_DIR`, or `./.foldscale-cache` when unset.
    pub fn from_env() -> Result<Self> {
        let dir = std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".foldscale-cache"));
        Self::open(dir.join(CACHE_FILE))
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn lookup(&self, op_id: &str, signature: &str, fingerprint: &str) -> Option<&CacheRecord> {
        self.records
            .iter()
            .find(|r| r.op_id == op_id && r.signature == signature && r.fingerprint == fingerprint)
    }

    pub fn insert(&mut self, record: CacheRecord) {
        self.records.retain(|r| {
            !(r.op_id == record.op_id
                && r.signature == record.signature
                && r.fingerprint == record.fingerprint)
        });
        self.records.push(record);
    }

    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            writeln!(f, "# op_id | signature | config | median_seconds | fingerprint")?;
            for r in &self.records {
                writeln!(f, "{}", r.to_line())?;
            }
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CandidateTiming {
    pub config: KernelConfig,
    pub median_s: Option<f64>,
    pub disqualified: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub op_id: String,
    pub signature: String,
    pub config: KernelConfig,
    pub measured_time: f64,
    pub from_cache: bool,
    /// Empty on a cache hit.
    pub timings: Vec<CandidateTiming>,
}

pub struct Autotuner {
    cache: TuneCache,
    fingerprint: String,
    pub warmup: usize,
    pub reps: usize,
    benchmarks_run: usize,
}

impl Autotuner {
    pub fn new(cache: TuneCache) -> Self {
        Self {
            cache,
            fingerprint: machine_fingerprint(),
            warmup: 2,
            reps: 5,
            benchmarks_run: 0,
        }
    }

    pub fn cache(&self) -> &TuneCache {
        &self.cache
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Total candidate benchmarks executed by this tuner.
    pub fn benchmarks_run(&self) -> usize {
        self.benchmarks_run
    }

    /// Picks the fastest correct candidate. `run` executes one candidate and
    /// returns its output, which must match `oracle` within `tol` (relative
    /// to `max(1, |oracle|)`).
    pub fn tune<F>(
        &mut self,
        op_id: &str,
        signature: &str,
        candidates: &[KernelConfig],
        oracle: &[f32],
        tol: f32,
        mut run: F,
    ) -> Result<TuneResult>
    where
        F: FnMut(&KernelConfig) -> Result<Vec<f32>>,
    {
        if candidates.is_empty() {
            return Err(Error::Autotune {
                op: op_id.into(),
                msg: "empty candidate set".into(),
            });
        }
        if let Some(hit) = self.cache.lookup(op_id, signature, &self.fingerprint) {
            if candidates.contains(&hit.config) {
                return Ok(TuneResult {
                    op_id: op_id.into(),
                    signature: signature.into(),
                    config: hit.config.clone(),
                    measured_time: hit.median_s,
                    from_cache: true,
                    timings: Vec::new(),
                });
            }
        }

        let mut timings = Vec::with_capacity(candidates.len());
        for cfg in candidates {
            self.benchmarks_run += 1;
            let mut once = || catch_unwind(AssertUnwindSafe(|| run(cfg)));
            let verdict = match once() {
                Err(_) => Some("panicked".to_string()),
                Ok(Err(e)) => Some(format!("error: {e}")),
                Ok(Ok(out)) => check_output(&out, oracle, tol),
            };
            if let Some(reason) = verdict {
                log::debug!("autotune {op_id} [{signature}]: {cfg} disqualified ({reason})");
                timings.push(CandidateTiming {
                    config: cfg.clone(),
                    median_s: None,
                    disqualified: Some(reason),
                });
                continue;
            }
            let mut failed = None;
            for _ in 0..self.warmup {
                if let Err(reason) = guarded(&mut run, cfg) {
                    failed = Some(reason);
                    break;
                }
            }
            let mut samples = Vec::with_capacity(self.reps);
            if failed.is_none() {
                for _ in 0..self.reps.max(1) {
                    let t0 = Instant::now();
                    if let Err(reason) = guarded(&mut run, cfg) {
                        failed = Some(reason);
                        break;
                    }
                    samples.push(t0.elapsed().as_secs_f64());
                }
            }
            match failed {
                Some(reason) => timings.push(CandidateTiming {
                    config: cfg.clone(),
                    median_s: None,
                    disqualified: Some(reason),
                }),
                None => timings.push(CandidateTiming {
                    config: cfg.clone(),
                    median_s: Some(median(&mut samples)),
                    disqualified: None,
                }),
            }
        }

        let best = timings
            .iter()
            .filter_map(|t| t.median_s.map(|m| (t, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(t, m)| (t.config.clone(), m))
            .ok_or_else(|| Error::Autotune {
                op: op_id.into(),
                msg: "every candidate was disqualified".into(),
            })?;

        self.cache.insert(CacheRecord {
            op_id: op_id.into(),
            signature: signature.into(),
            config: best.0.clone(),
            median_s: best.1,
            fingerprint: self.fingerprint.clone(),
        });
        self.cache.save()?;
        Ok(TuneResult {
            op_id: op_id.into(),
            signature: signature.into(),
            config: best.0,
            measured_time: best.1,
            from_cache: false,
            timings,
        })
    }
}

fn guarded<F>(run: &mut F, cfg: &KernelConfig) -> std::result::Result<(), String>
where
    F: FnMut(&KernelConfig) -> Result<Vec<f32>>,
{
    match catch_unwind(AssertUnwindSafe(|| run(cfg))) {
        Ok(Ok(_)) => Ok(()),
        Ok(Err(e)) => Err(format!("error: {e}")),
        Err(_) => Err("panicked".into()),
    }
}

fn check_output(out: &[f32], oracle: &[f32], tol: f32) -> Option<String> {
    if out.len() != oracle.len() {
        return Some(format!("output length {} != {}", out.len(), oracle.len()));
    }
    for (i, (a, b)) in out.iter().zip(oracle).enumerate() {
        if !((a - b).abs() <= tol * b.abs().max(1.0)) {
            return Some(format!("mismatch at {i}: {a} vs {b}"));
        }
    }
    None
}

pub(crate) fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_text() {
        for cfg in [
            KernelConfig::default(),
            KernelConfig::tiles(16, 32),
            KernelConfig::rows(8),
            KernelConfig {
                split: Some(2),
                ..KernelConfig::tiles(4, 4)
            },
        ] {
            assert_eq!(cfg.to_string().parse::<KernelConfig>().unwrap(), cfg);
        }
        assert!("tile_q=x".parse::<KernelConfig>().is_err());
        assert!("bogus=1".parse::<KernelConfig>().is_err());
    }

    #[test]
    fn single_candidate_wins() {
        let mut t = Autotuner::new(TuneCache::in_memory());
        let r = t
            .tune("op", "n=1", &[KernelConfig::rows(1)], &[1.0], 0.0, |_| Ok(vec![1.0]))
            .unwrap();
        assert_eq!(r.config, KernelConfig::rows(1));
        assert!(!r.from_cache);
    }

    #[test]
    fn incorrect_or_crashing_candidates_never_win() {
        let mut t = Autotuner::new(TuneCache::in_memory());
        let cands = [KernelConfig::rows(1), KernelConfig::rows(2), KernelConfig::rows(3), KernelConfig::rows(4)];
        let r = t
            .tune("op", "n=1", &cands, &[1.0, 2.0], 1e-6, |cfg| match cfg.rows_per_block {
                // correct but slow
                Some(1) => {
                    std::thread::sleep(std::time::Duration::from_millis(2));
                    Ok(vec![1.0, 2.0])
                }
                // correct and fast
                Some(2) => Ok(vec![1.0, 2.0]),
                // fastest but wrong
                Some(3) => Ok(vec![1.0, 2.5]),
                _ => panic!("boom"),
            })
            .unwrap();
        assert_eq!(r.config, KernelConfig::rows(2));
        let dq: Vec<_> = r.timings.iter().filter(|t| t.disqualified.is_some()).collect();
        assert_eq!(dq.len(), 2);
    }

    #[test]
    fn all_disqualified_is_an_error() {
        let mut t = Autotuner::new(TuneCache::in_memory());
        assert!(t
            .tune("op", "s", &[KernelConfig::rows(1)], &[0.0], 0.0, |_| Ok(vec![1.0]))
            .is_err());
        assert!(t.tune("op", "s", &[], &[0.0], 0.0, |_| Ok(vec![0.0])).is_err());
    }

    #[test]
    fn cache_file_roundtrip_skips_rebenchmark() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CACHE_FILE);
        let cands = [KernelConfig::rows(1), KernelConfig::rows(2)];
        let first = {
            let mut t = Autotuner::new(TuneCache::open(&path).unwrap());
            t.tune("ln", "rows=4;c=2", &cands, &[0.0], 0.0, |_| Ok(vec![0.0])).unwrap()
        };
        let mut t = Autotuner::new(TuneCache::open(&path).unwrap());
        let again = t
            .tune("ln", "rows=4;c=2", &cands, &[0.0], 0.0, |_| panic!("must not run"))
            .unwrap();
        assert!(again.from_cache);
        assert_eq!(again.config, first.config);
        assert_eq!(t.benchmarks_run(), 0);
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(line.split(" | ").count(), 5);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

use std::time::Duration;

use super::TrainConfig;
use crate::config::Ini;
use crate::datapipe::Mode;
use crate::error::{Error, Result};
use crate::evoformer::BiasMode;
use crate::tensor::Precision;

const TRAIN_KEYS: &[&str] = &[
    "global_batch",
    "allow_large_batch",
    "dap",
    "steps",
    "precision",
    "checkpointing",
    "replay",
    "jitter_p",
    "jitter_ms",
    "eval_every",
    "eval_size",
    "eval_cost_ms",
    "seed",
    "lr",
    "max_norm",
    "workers",
    "pipe_mode",
    "prep_base_ms",
    "dataset_size",
];

const MODEL_KEYS: &[&str] = &[
    "n_blocks",
    "s",
    "r",
    "c_m",
    "c_z",
    "heads",
    "head_dim",
    "transition_factor",
    "c_opm",
    "n_recycle_max",
    "bias_mode",
];

fn enum_key<T>(ini: &Ini, s: &str, k: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
    match ini.raw(s, k) {
        None => Ok(None),
        Some(v) => parse(v)
            .map(Some)
            .ok_or_else(|| Error::config(format!("{s}.{k}"), format!("unknown value `{v}`"))),
    }
}

fn on_off(v: &str) -> Option<bool> {
    match v {
        "on" | "true" | "1" => Some(true),
        "off" | "false" | "0" => Some(false),
        _ => None,
    }
}

fn ms(v: f64) -> Duration {
    Duration::from_secs_f64(v.max(0.0) / 1e3)
}

impl TrainConfig {
    /// Defaults overridden by sections `[train]` and `[model]`.
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        ini.reject_unknown("train", TRAIN_KEYS)?;
        ini.reject_unknown("model", MODEL_KEYS)?;
        let mut c = TrainConfig::default();
        const T: &str = "train";
        c.global_batch = ini.get_or(T, "global_batch", c.global_batch)?;
        if let Some(v) = enum_key(ini, T, "allow_large_batch", on_off)? {
            c.allow_large_batch = v;
        }
        c.dap_n = ini.get_or(T, "dap", c.dap_n)?;
        c.n_steps = ini.get_or(T, "steps", c.n_steps)?;
        if let Some(p) = enum_key(ini, T, "precision", Precision::parse)? {
            c.precision = p;
        }
        if let Some(v) = enum_key(ini, T, "checkpointing", on_off)? {
            c.checkpointing = v;
        }
        if let Some(v) = enum_key(ini, T, "replay", on_off)? {
            c.plan_replay = v;
        }
        let jp: Option<f64> = ini.get(T, "jitter_p")?;
        let jm: Option<f64> = ini.get(T, "jitter_ms")?;
        if jp.is_some() || jm.is_some() {
            c.gc_pause_injection = Some((jp.unwrap_or(0.1), ms(jm.unwrap_or(5.0))));
        }
        c.eval_every = ini.get_or(T, "eval_every", c.eval_every)?;
        c.eval_size = ini.get_or(T, "eval_size", c.eval_size)?;
        if let Some(v) = ini.get::<f64>(T, "eval_cost_ms")? {
            c.eval_cost = ms(v);
        }
        c.seed = ini.get_or(T, "seed", c.seed)?;
        c.hyper.lr = ini.get_or(T, "lr", c.hyper.lr)?;
        c.max_norm = ini.get_or(T, "max_norm", c.max_norm)?;
        c.workers = ini.get_or(T, "workers", c.workers)?;
        if let Some(m) = enum_key(ini, T, "pipe_mode", Mode::parse)? {
            c.pipe_mode = m;
        }
        if let Some(v) = ini.get::<f64>(T, "prep_base_ms")? {
            c.prep.base = ms(v);
        }
        c.dataset_size = ini.get_or(T, "dataset_size", c.dataset_size)?;

        const M: &str = "model";
        let m = &mut c.model;
        m.n_blocks = ini.get_or(M, "n_blocks", m.n_blocks)?;
        m.s = ini.get_or(M, "s", m.s)?;
        m.r = ini.get_or(M, "r", m.r)?;
        m.c_m = ini.get_or(M, "c_m", m.c_m)?;
        m.c_z = ini.get_or(M, "c_z", m.c_z)?;
        m.heads = ini.get_or(M, "heads", m.heads)?;
        m.head_dim = ini.get_or(M, "head_dim", m.head_dim)?;
        m.transition_factor = ini.get_or(M, "transition_factor", m.transition_factor)?;
        m.c_opm = ini.get_or(M, "c_opm", m.c_opm)?;
        m.n_recycle_max = ini.get_or(M, "n_recycle_max", m.n_recycle_max)?;
        if let Some(b) = enum_key(ini, M, "bias_mode", BiasMode::parse)? {
            m.bias_mode = b;
        }
        Ok(c)
    }

    /// Inverse of [`TrainConfig::from_ini`].
    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::default();
        const T: &str = "train";
        let flag = |b: bool| if b { "on" } else { "off" };
        ini.set(T, "global_batch", self.global_batch);
        ini.set(T, "allow_large_batch", flag(self.allow_large_batch));
        ini.set(T, "dap", self.dap_n);
        ini.set(T, "steps", self.n_steps);
        ini.set(T, "precision", self.precision.as_str());
        ini.set(T, "checkpointing", flag(self.checkpointing));
        ini.set(T, "replay", flag(self.plan_replay));
        if let Some((p, d)) = self.gc_pause_injection {
            ini.set(T, "jitter_p", p);
            ini.set(T, "jitter_ms", d.as_secs_f64() * 1e3);
        }
        ini.set(T, "eval_every", self.eval_every);
        ini.set(T, "eval_size", self.eval_size);
        ini.set(T, "eval_cost_ms", self.eval_cost.as_secs_f64() * 1e3);
        ini.set(T, "seed", self.seed);
        ini.set(T, "lr", self.hyper.lr);
        ini.set(T, "max_norm", self.max_norm);
        ini.set(T, "workers", self.workers);
        ini.set(T, "pipe_mode", self.pipe_mode.as_str());
        ini.set(T, "prep_base_ms", self.prep.base.as_secs_f64() * 1e3);
        ini.set(T, "dataset_size", self.dataset_size);
        const M: &str = "model";
        let m = &self.model;
        ini.set(M, "n_blocks", m.n_blocks);
        ini.set(M, "s", m.s);
        ini.set(M, "r", m.r);
        ini.set(M, "c_m", m.c_m);
        ini.set(M, "c_z", m.c_z);
        ini.set(M, "heads", m.heads);
        ini.set(M, "head_dim", m.head_dim);
        ini.set(M, "transition_factor", m.transition_factor);
        ini.set(M, "c_opm", m.c_opm);
        ini.set(M, "n_recycle_max", m.n_recycle_max);
        ini.set(M, "bias_mode", m.bias_mode.as_str());
        ini
    }
}

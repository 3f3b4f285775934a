//! Capture-once, replay-afterwards cache of execution plans.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::runtime::{Exec, ExecutionPlan};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PlanKey {
    /// Input shape signature.
    pub shapes: String,
    pub n_recycle: usize,
}

impl fmt::Display for PlanKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@recycle{}", self.shapes, self.n_recycle)
    }
}

#[derive(Debug, Default)]
pub struct PlanCache {
    plans: HashMap<PlanKey, Arc<ExecutionPlan>>,
    /// Plans kept per shape signature.
    capacity: usize,
    pub captures: u64,
    pub hits: u64,
    /// Calls that ran eagerly because the shape already had `capacity` plans.
    pub uncached: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanOutcome {
    Captured,
    Replayed,
    Eager,
}

impl PlanCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn contains(&self, key: &PlanKey) -> bool {
        self.plans.contains_key(key)
    }

    /// Runs `thunk` on `exec`. The first call for `key` records the op
    /// sequence; later calls replay it, skipping tuning lookups and host
    /// jitter. A replay whose ops drift from the recording fails with
    /// [`Error::CaptureInvalidated`] naming the key.
    pub fn capture_or_replay<T>(
        &mut self,
        key: &PlanKey,
        exec: &mut Exec,
        thunk: impl FnOnce(&mut Exec) -> Result<T>,
    ) -> Result<(T, PlanOutcome)> {
        if let Some(plan) = self.plans.get(key) {
            exec.begin_replay(plan.clone());
            let out = thunk(exec);
            let out = match out {
                Ok(v) => {
                    exec.finish_replay()?;
                    v
                }
                Err(e) => {
                    exec.reset_mode();
                    return Err(match e {
                        Error::CaptureInvalidated { msg, .. } => Error::CaptureInvalidated {
                            key: key.to_string(),
                            msg,
                        },
                        other => other,
                    });
                }
            };
            self.hits += 1;
            return Ok((out, PlanOutcome::Replayed));
        }
        let per_shape = self.plans.keys().filter(|k| k.shapes == key.shapes).count();
        if per_shape >= self.capacity {
            self.uncached += 1;
            return Ok((thunk(exec)?, PlanOutcome::Eager));
        }
        exec.begin_capture();
        let out = match thunk(exec) {
            Ok(v) => v,
            Err(e) => {
                exec.reset_mode();
                return Err(e);
            }
        };
        let plan = exec.finish_capture(key.to_string())?;
        self.plans.insert(key.clone(), Arc::new(plan));
        self.captures += 1;
        Ok((out, PlanOutcome::Captured))
    }
}

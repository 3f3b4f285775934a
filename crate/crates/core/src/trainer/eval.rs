//! Evaluation on a dedicated thread against averaged-weight snapshots.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::evoformer::{mse_loss, Evoformer, Inputs};
use crate::kernels::PackedParams;

/// Evaluation inputs and targets, fully resident in memory.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub inputs: Vec<Inputs>,
    pub targets: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub step: usize,
    /// Mean loss over the eval set.
    pub metric: f32,
    pub wall_s: f64,
    /// Took longer than the training interval it was meant to overlap.
    pub lagging: bool,
}

struct Job {
    step: usize,
    params: PackedParams,
    interval_s: f64,
}

pub struct AsyncEvaluator {
    tx: Option<Sender<Job>>,
    rx: Receiver<Result<EvalResult>>,
    worker: Option<JoinHandle<()>>,
    pending: usize,
    pub lag_warnings: u64,
}

fn evaluate(model: &Evoformer, set: &EvalSet, params: &PackedParams, cost: Duration) -> Result<f32> {
    let t0 = Instant::now();
    let mut total = 0.0f32;
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        let out = model.forward_local(params, x, 1)?;
        total += mse_loss(&out.features, t)?.0;
    }
    while t0.elapsed() < cost {
        std::thread::sleep(Duration::from_micros(200));
    }
    Ok(total / set.inputs.len().max(1) as f32)
}

impl AsyncEvaluator {
    /// Spawns the eval worker. `cost` is a minimum wall time per evaluation.
    pub fn new(model: Evoformer, set: Arc<EvalSet>, cost: Duration) -> Result<Self> {
        let (tx, jobs) = channel::<Job>();
        let (results, rx) = channel();
        let worker = std::thread::Builder::new()
            .name("async-eval".into())
            .spawn(move || {
                for job in jobs {
                    let t0 = Instant::now();
                    let r = catch_unwind(AssertUnwindSafe(|| evaluate(&model, &set, &job.params, cost)));
                    let wall_s = t0.elapsed().as_secs_f64();
                    let msg = match r {
                        Ok(Ok(metric)) => Ok(EvalResult {
                            step: job.step,
                            metric,
                            wall_s,
                            lagging: wall_s > job.interval_s,
                        }),
                        Ok(Err(e)) => Err(Error::Eval {
                            step: job.step,
                            msg: e.to_string(),
                        }),
                        Err(_) => Err(Error::Eval {
                            step: job.step,
                            msg: "eval worker panicked".into(),
                        }),
                    };
                    if results.send(msg).is_err() {
                        break;
                    }
                }
            })?;
        Ok(Self {
            tx: Some(tx),
            rx,
            worker: Some(worker),
            pending: 0,
            lag_warnings: 0,
        })
    }

    /// Queues an evaluation of `snapshot`. `interval_s` is the training time
    /// the evaluation is expected to overlap.
    pub fn submit(&mut self, step: usize, snapshot: PackedParams, interval_s: f64) -> Result<()> {
        let tx = self.tx.as_ref().expect("sender lives until drop");
        tx.send(Job {
            step,
            params: snapshot,
            interval_s,
        })
        .map_err(|_| Error::Eval {
            step,
            msg: "eval worker is gone".into(),
        })?;
        self.pending += 1;
        Ok(())
    }

    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Results that are already available.
    pub fn poll(&mut self) -> Vec<Result<EvalResult>> {
        self.poll_timeout(Duration::ZERO)
    }

    /// Waits up to `timeout` for the first result, then drains the rest.
    pub fn poll_timeout(&mut self, timeout: Duration) -> Vec<Result<EvalResult>> {
        let mut out = Vec::new();
        if self.pending > 0 && !timeout.is_zero() {
            match self.rx.recv_timeout(timeout) {
                Ok(r) => out.push(r),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return out,
            }
        }
        while let Ok(r) = self.rx.try_recv() {
            out.push(r);
        }
        self.pending -= out.len();
        for r in out.iter().flatten() {
            if r.lagging {
                self.lag_warnings += 1;
                log::warn!(
                    "evaluation for step {} took {:.3}s, longer than the training interval",
                    r.step,
                    r.wall_s
                );
            }
        }
        out
    }

    /// Blocks until every submitted evaluation has reported.
    pub fn drain(&mut self) -> Vec<Result<EvalResult>> {
        let mut out = Vec::new();
        while self.pending > 0 {
            let got = self.poll_timeout(Duration::from_secs(3600));
            if got.is_empty() {
                break;
            }
            out.extend(got);
        }
        out
    }
}

impl Drop for AsyncEvaluator {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

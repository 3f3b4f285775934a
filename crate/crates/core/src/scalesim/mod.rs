//! Discrete-event model of synchronous DAP/DP training with stragglers and
//! the scaling-loss breakdown built on it.

mod analysis;
mod model;
mod sim;

pub use analysis::{
    amdahl_speedup, breakdown, calibrate, kernel_efficiency_from_bench, time_to_train_model, BreakdownReport,
    Calibration, EvalMode, Factor,
};
pub use model::{pipeline_waits_from_csv, CommModel, EfficiencyCurve, StepModel, StragglerModel};
pub use sim::{
    dap_speedup, estimate_imbalance, ns_to_s, simulate, to_ns, EventKind, RankEvent, RankTrace, SimConfig, SimResult,
};

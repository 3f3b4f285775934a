//! Per-category op counts and times from an execution trace.

use crate::runtime::{OpCategory, TraceEntry};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepAccounting {
    pub math_calls: u64,
    pub mem_bound_calls: u64,
    pub mem_op_calls: u64,
    pub math_s: f64,
    pub mem_bound_s: f64,
    pub mem_op_s: f64,
    /// Dispatch gap before each launch.
    pub host_s: f64,
}

impl StepAccounting {
    pub fn total_calls(&self) -> u64 {
        self.math_calls + self.mem_bound_calls + self.mem_op_calls
    }

    /// Call fractions `(math, memory-bound, memory-op)`.
    pub fn call_fractions(&self) -> (f64, f64, f64) {
        let t = self.total_calls().max(1) as f64;
        (
            self.math_calls as f64 / t,
            self.mem_bound_calls as f64 / t,
            self.mem_op_calls as f64 / t,
        )
    }

    /// Time fractions `(math, memory-bound, memory-op, host)`.
    pub fn time_fractions(&self) -> (f64, f64, f64, f64) {
        let t = self.math_s + self.mem_bound_s + self.mem_op_s + self.host_s;
        if t <= 0.0 {
            return (0.0, 0.0, 0.0, 0.0);
        }
        (self.math_s / t, self.mem_bound_s / t, self.mem_op_s / t, self.host_s / t)
    }

    pub fn merge(&mut self, o: &StepAccounting) {
        self.math_calls += o.math_calls;
        self.mem_bound_calls += o.mem_bound_calls;
        self.mem_op_calls += o.mem_op_calls;
        self.math_s += o.math_s;
        self.mem_bound_s += o.mem_bound_s;
        self.mem_op_s += o.mem_op_s;
        self.host_s += o.host_s;
    }
}

pub fn categorize_ops(trace: &[TraceEntry]) -> StepAccounting {
    let mut a = StepAccounting::default();
    for e in trace {
        match e.category {
            OpCategory::MathBound => {
                a.math_calls += 1;
                a.math_s += e.kernel_s;
            }
            OpCategory::MemoryBound => {
                a.mem_bound_calls += 1;
                a.mem_bound_s += e.kernel_s;
            }
            OpCategory::MemoryOp => {
                a.mem_op_calls += 1;
                a.mem_op_s += e.kernel_s;
            }
        }
        a.host_s += e.host_s;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(category: OpCategory) -> TraceEntry {
        TraceEntry {
            op: "x",
            category,
            kernel_s: 1e-6,
            host_s: 1e-7,
            recompute: false,
        }
    }

    #[test]
    fn pure_gemm_trace_is_all_math() {
        let a = categorize_ops(&vec![entry(OpCategory::MathBound); 10]);
        assert_eq!(a.call_fractions(), (1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_trace() {
        let a = categorize_ops(&[]);
        assert_eq!(a.total_calls(), 0);
        assert_eq!(a.time_fractions(), (0.0, 0.0, 0.0, 0.0));
    }
}

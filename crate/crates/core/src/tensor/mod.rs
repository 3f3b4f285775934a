//! Dense row-major tensors and the naive reference operations every fused
//! kernel is checked against.
//!
//! Values are always stored as `f32`. [`Precision::Bf16E`] tensors hold values
//! that lie on the bfloat16 grid, which emulates bf16 storage without a
//! separate element type.

mod bf16;
pub mod io;
pub(crate) mod ops;

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use bf16::{round_bf16, round_bf16_scalar, round_bf16_slice};
pub use ops::{
    add, batched_gemm, concat, gelu, gelu_grad, gemm, mul, narrow, permute, reduce_sum, scale,
    sigmoid, softmax_lastdim, transpose2d,
};

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    /// bf16-emulated: stored as f32, constrained to the bf16 grid.
    Bf16E,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "F32" => Some(Precision::F32),
            "bf16" | "bf16e" | "BF16" | "BF16E" => Some(Precision::Bf16E),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::Bf16E => "bf16",
        }
    }
}

thread_local! {
    static DISPATCHES: Cell<u64> = const { Cell::new(0) };
}

/// Number of kernel dispatches issued on the current thread.
pub fn dispatch_count() -> u64 {
    DISPATCHES.with(|d| d.get())
}

pub(crate) fn record_dispatch() {
    DISPATCHES.with(|d| d.set(d.get() + 1));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision: Precision::F32,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            precision: Precision::F32,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            precision: Precision::F32,
        }
    }

    /// Standard-normal samples multiplied by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the element buffer. Callers writing into a
    /// [`Precision::Bf16E`] tensor must keep values on the bf16 grid.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Converts to `precision`, rounding onto the bf16 grid when needed.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        if precision == Precision::Bf16E && self.precision != Precision::Bf16E {
            round_bf16_slice(&mut self.data);
        }
        self.precision = precision;
        self
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        if self.precision == Precision::Bf16E {
            round_bf16_slice(&mut self.data);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Largest elementwise |a - b|.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest elementwise |a - b| / max(|b|, floor).
pub fn max_rel_diff(a: &[f32], b: &[f32], floor: f32) -> f32 {
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| {
        m.max((x - y).abs() / y.abs().max(floor))
    })
}

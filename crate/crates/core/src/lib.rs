pub mod config;
pub mod dap;
pub mod datapipe;
pub mod error;
pub mod evoformer;
pub mod kernels;
pub mod runtime;
pub mod scalesim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

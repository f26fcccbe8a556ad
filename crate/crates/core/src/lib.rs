//! Modular continual learning on a small reverse-mode tensor library.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

pub mod baselines;
pub mod cell;
pub mod error;
pub mod metrics;
pub mod net;
pub mod record;
pub mod scalar;
pub mod taskgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ModuleCell = cell::ModuleCell<f64>;
pub type LmcNetwork = net::LmcNetwork<f64>;

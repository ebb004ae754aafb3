//! Weight-tied iterative reasoners trained for stable equilibria.
//!
//! The crate is generic over the scalar type; `f32` is the working precision
//! and `f64` is used by gradient checks and diagnostics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Reasoner32 = model::Reasoner<f32>;
pub type Reasoner64 = model::Reasoner<f64>;

//! Frequency-aware patch transformer with exogenous variable tokens for
//! one-step-ahead emissions forecasting.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Checkpoint, FTimeXer, ModelConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type FTimeXer64 = FTimeXer<f64>;
pub type FTimeXer32 = FTimeXer<f32>;

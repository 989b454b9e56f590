//! Budget-limited transformer pretraining on a reference-time clock.
//!
//! The numerical core (tensors, tape autodiff, model, optimizers) is generic
//! over [`Scalar`]; the experiment harness runs in `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod clock;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod report;
pub mod scalar;
pub mod schedule;
pub mod select;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type OptimizerState64 = optim::OptimizerState<f64>;
pub type OptimizerState32 = optim::OptimizerState<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;

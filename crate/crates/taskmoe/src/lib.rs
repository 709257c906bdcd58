//! Task-level mixture-of-experts text-to-text transformers.
//!
//! A desk-scale library for training encoder-decoder transformers whose
//! layers are replicated into experts and mixed per task by a learned
//! router, plus the surrounding machinery: task suites, task
//! representations, two-stage annealed training, few-shot/zero-shot
//! adaptation, and route analysis.
//!
//! The numeric core ([`tensor`], [`tape`], [`optim`], [`pca`], [`stats`])
//! is generic over the scalar type via [`scalar::Scalar`]; concrete `f64`
//! aliases used by the model stack are exported below.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod tape;
pub mod params;
pub mod optim;
pub mod rngutil;
pub mod model;
pub mod checkpoint;
pub mod routing;
pub mod corpus;
pub mod pca;
pub mod stats;
pub mod repr;
pub mod analysis;
pub mod training;

pub use error::{Error, Result};

/// Default scalar for training runs; gradient-check tolerances assume it.
pub type F = f64;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type AdamState64 = optim::AdamState<f64>;

//! Popularity-bias laboratory for semantic-ID generative recommenders.
//!
//! The numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the gradient checks
//! and the command-line pipeline use.

pub mod biaslab;
pub mod corpus;
pub mod error;
pub mod evalx;
pub mod linalg;
pub mod model;
pub mod quantize;
pub mod scalar;
pub mod skt;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ItemRep = quantize::ItemRep<f64>;
pub type Codebook = quantize::Codebook<f64>;
pub type ResidualCode = quantize::ResidualCode<f64>;
pub type Tokenization = skt::Tokenization<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type StepRecord = model::StepRecord<f64>;
pub type TrainOutcome = model::TrainOutcome<f64>;

//! Concept-based explanations for recurrent time-series models.
//!
//! The crate covers the whole pipeline:
//!
//! - [`numerics`]: dense tensors and a reverse-mode autodiff graph,
//! - [`synthgen`]: a synthetic benchmark where latent concepts switch on
//!   sinusoidal patterns in a subset of features and drive the labels,
//! - [`rnn`]: a stacked LSTM with per-timestep sigmoid heads, trained by
//!   full backpropagation through time,
//! - [`stats`]: AUROC / AUPRC / balanced accuracy, bootstrap and permutation
//!   machinery,
//! - [`cav`]: concept activation vectors from activation windows, with
//!   significance testing and generalization across timesteps,
//! - [`scores`]: temporal concept alignment (tCA) and conceptual sensitivity
//!   (CS) trajectories, aggregation and null bands,
//! - [`attribution`]: gradient and occlusion feature attributions,
//! - [`cohort`]: standardized L1 control matching via the Hungarian method,
//! - [`harness`]: config-driven experiment runner and report emission.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used throughout.

pub mod attribution;
pub mod cav;
pub mod cohort;
pub mod error;
pub mod harness;
pub mod io;
pub mod numerics;
pub mod rng;
pub mod rnn;
pub mod scalar;
pub mod scores;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type LstmParams32 = rnn::LstmParams<f32>;
pub type LstmParams64 = rnn::LstmParams<f64>;

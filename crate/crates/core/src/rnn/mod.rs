//! Stacked LSTM with one sigmoid output per target at every timestep.
//!
//! Layers are indexed from 0 (closest to the input) to `n_layers - 1`.

mod forward;
mod graphs;
mod model;
mod params;

pub use forward::{run, Run, Stepper};
pub use graphs::{OutputKind, StepGraph, StepInput, UnrolledLoss};
pub use model::{train, train_with, ActivationTrace, ModelMetrics, Precision, TrainConfig, TrainedModel};
pub use params::{LayerParams, LstmParams, ModelSpec};

//! Training and analysis library for small spiking networks.
//!
//! The crate builds layered leaky integrate-and-fire classifiers over
//! time-stacked activations, trains them with surrogate-gradient
//! backpropagation through time, and optionally regularizes membrane
//! potentials away from the firing threshold with a scheduled
//! quantization penalty. Analysis utilities estimate how much spike
//! quantization distorts the membrane distributions.
//!
//! Everything is deterministic: one seed fixes initialization, data
//! shuffling, and therefore every float in a run.

// Negated comparisons like `!(p > 0.0)` are used on purpose in parameter
// validation: unlike `p <= 0.0` they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod network;
pub mod neuron;
pub mod normalization;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;

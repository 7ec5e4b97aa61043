//! Configuration, synthetic data, training, evaluation and ablations.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod synth;
pub mod train;

pub use config::{ReconTarget, RunConfig};

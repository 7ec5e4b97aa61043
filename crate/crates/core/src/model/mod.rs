//! Two-stream transformer with cross-modal fusion and hand-written backward
//! passes.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;

pub use params::{Mat, ModelDims, ModelParams};

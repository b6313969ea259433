//! Minimal reverse-mode differentiable tensor engine and Adam optimizer.
//!
//! Everything learnable in the pipeline is expressed through these
//! operations. f32 is the training precision; the same code instantiates
//! at f64 for gradient checking.

mod adam;
mod graph;
mod scalar;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Value};
pub use scalar::Scalar;
pub use tensor::Tensor;

//! OW-SLR: arbitrary-scale image super-resolution built on semi-local
//! latent regions and overlapping-window aggregation.
//!
//! The pipeline maps a low-resolution image to a latent feature map,
//! gathers a square semi-local region of latent codes around any
//! continuous query coordinate, shrinks it with learned overlapping
//! corner windows, and decodes an RGB value with a small MLP. One trained
//! weight set serves every real-valued upscaling factor.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod model;
pub mod numerics;
pub mod owdecoder;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

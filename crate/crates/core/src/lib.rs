//! Spatiotemporal U-Nets for multi-step gridded sea-element forecasting.
//!
//! The encoder runs 3D convolutions over a stack of lagged frames; learned
//! `L×1×1` convolutions collapse the time axis of every skip connection so
//! the decoder reconstructs a single frame `h` steps ahead.

pub mod autograd;
pub mod blocks;
pub mod data;
pub mod error;
pub mod exec;
pub mod models;
pub mod nn;
pub mod params;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use models::{Architecture, ModelConfig, ModelGraph};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;

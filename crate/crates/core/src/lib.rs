//! Hyperconditioned cascades of differentiable biquads for modeling
//! parametric distortion effects.
//!
//! Models are trained through a frequency-sampled forward pass with exact
//! hand-written adjoints and run at inference time by recursive filtering.

pub mod data;
pub mod document;
pub mod dsp;
pub mod error;
pub mod export;
pub mod hyper;
pub mod model;
pub mod reps;
pub mod scalar;
mod spectral;
pub mod train;
pub mod wav;

pub use error::{Error, Result};

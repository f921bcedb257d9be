//! Iterative audio-effect programming: a surrogate synth and effect rack,
//! spectral features and similarity metrics, parameter and selection models,
//! and the session loop that ties them together.

pub mod dataset;
pub mod dsp;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod metrics;
pub mod models;
pub mod pipeline;

pub use error::{Error, Result};

//! Protective perturbations for still images against image-to-video
//! animation pipelines, with evaluation metrics and robustness sweeps.

pub mod animate;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod extractors;
pub mod eot;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pgd;
pub mod resample;
pub mod robustness;
pub mod tensor;

pub use error::{Error, Result};

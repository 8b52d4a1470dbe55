//! Classifier-protected sampling for small diffusion models.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, DDPM/DDIM
//! machinery, time-conditioned MLP models, the protected sampler, and the
//! audit tooling used to check that protected samples stay away from the
//! training data.

pub mod archive;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod lemma;
pub mod mia;
pub mod models;
pub mod permutation;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod similarity;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

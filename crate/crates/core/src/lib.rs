//! Conditional density-ratio estimation in feature space and ratio-guided
//! rejection sampling from conditional generators.
//!
//! The pieces, bottom-up:
//!
//! - [`nn`]: dense MLPs with group norm, dropout, manual backprop, Adam/SGD.
//! - [`cdre`]: the conditional ratio model `ψ(h|y)`, its conditional Softplus
//!   loss with the mean-one penalty, and the training loop.
//! - [`features`]: feature extractors (identity, sparse autoencoder with a
//!   label-prediction branch, dense classifier).
//! - [`sampler`]: burn-in estimation of `M`, rejection sampling, and the
//!   predicted-label vicinity filter.
//! - [`synthetic`]: conditional Gaussian tasks with closed-form ratios.
//! - [`metrics`]: Label Score, Diversity, Fréchet distance, Intra-FID.
//! - [`pipeline`]: configuration and the train/sample/evaluate stages.

pub mod cdre;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};

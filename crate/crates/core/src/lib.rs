//! Sinusoidal time embeddings for irregularly sampled multivariate time
//! series, with the models, training harness, metrics and synthetic
//! benchmark needed to evaluate them.

pub mod benchgen;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod training;

pub use error::{Error, Result};

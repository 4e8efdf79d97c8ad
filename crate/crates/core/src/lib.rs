//! Spatiotemporal traffic forecasting with training-free PCA node embeddings.
//!
//! The crate compares trainable adaptive node embeddings against frozen
//! embeddings projected from each node's daily profile, under in-distribution,
//! cross-year and cross-city evaluation.

pub mod dataset;
pub mod error;
pub mod io;
pub mod par;
pub mod graph;
pub mod pca;
pub mod model;
pub mod metrics;
pub mod train;
pub mod synth;
pub mod experiment;
pub mod transfer;
pub mod sweep;
pub mod config;
pub mod cli;

pub use error::{Error, Result};

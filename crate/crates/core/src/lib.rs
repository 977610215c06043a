//! Channel-aware anomaly detection for multivariate time series via
//! frequency patching.
//!
//! The pipeline is: [`seriesio`] windows and normalizes the data, [`spectral`]
//! moves each window into the frequency domain and cuts it into bands,
//! [`model`] reconstructs the spectrum with channel-masked attention,
//! [`trainer`] alternates mask-generator and model updates, and [`scoring`]
//! turns reconstructions into per-timestamp anomaly scores. [`synthgen`]
//! produces labelled synthetic benchmarks and [`metrics`] evaluates scores.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod scoring;
pub mod seriesio;
pub mod spectral;
pub mod synthgen;
pub mod trainer;

pub use error::{CatchError, Result};

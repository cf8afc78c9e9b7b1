//! Calibrated anomaly detection for networks of quasiperiodic sensors.
//!
//! Each station's "business as usual" is learned as a time-varying Gaussian
//! whose parameters are a small network applied to fixed sinusoidal features.
//! Deviations become z-scores, optionally net of a domain model's own
//! deviations, and are tested per station against the empirical distribution
//! of their rolling means and per region with a PCA-truncated Mahalanobis test.

pub mod dpk;
pub mod error;
pub mod fmt;
pub mod ingest;
pub mod pipeline;
pub mod region;
pub mod report;
pub mod scoring;
pub mod special;
pub mod sweep;
pub mod synth;
pub mod time;

pub use error::{Error, Result};

//! Battery capacity-fade prognostics from randomized usage data.
//!
//! The pipeline: parse per-cell telemetry and reference tests
//! ([`data_ingest`]), segment each cell's history into load patterns
//! bracketed by capacity measurements, map each pattern to a fixed-size
//! feature vector ([`features`]), learn the capacity change per pattern
//! with a Gaussian process ([`gp_core`]) or boosted quantile trees
//! ([`gboost`]), roll predictions into capacity trajectories with
//! credible bands ([`transition`]), and score them ([`metrics`]). A
//! seeded synthetic dataset ([`synthetic`]) exercises everything without
//! external data.

pub mod data_ingest;
pub mod error;
pub mod features;
pub mod gboost;
pub mod gp_core;
pub mod metrics;
pub mod synthetic;
pub mod transition;

pub use error::{Error, Result};

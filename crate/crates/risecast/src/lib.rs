//! County-level forecasting of weekly case-growth ranges.
//!
//! The pipeline turns heterogeneous per-county feature groups (static
//! attributes, daily time series, cross-county flows) into equidimensional
//! embeddings, models explicit pairwise and higher-order interactions
//! between them, and predicts which of an ordered set of growth ranges the
//! next week's rise in cases will fall into.
//!
//! Crate layout:
//!
//! - [`numcore`] — dense f64 tensors, a reverse-mode computation tape, and a
//!   finite-difference gradient oracle
//! - [`embeddings`] — per-group embedding contractions with parameter
//!   sharing across time and county axes
//! - [`interaction`] — pairwise dot-product interactions, the
//!   self-normalizing deep network, and the output head
//! - [`ordinal`] — class boundaries, exceedance-probability transform, and
//!   the combined binary + multi-class loss
//! - [`model`] — the assembled network, initialization, and batched
//!   forward/loss/predict paths
//! - [`features`] — case-series and activity-grid formulas, dataset
//!   windowing, the on-disk universe format, and the synthetic generator
//! - [`training`] — mini-batch training, chronological splits, the two-step
//!   protocol, and Gaussian-process hyperparameter search
//! - [`analysis`] — permutation feature importance, time-step importance,
//!   and interaction-magnitude reports
//! - [`artifact`] — versioned model persistence

pub mod analysis;
pub mod artifact;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod interaction;
pub mod model;
pub mod numcore;
pub mod ordinal;
pub mod rng;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

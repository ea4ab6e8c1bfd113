//! Estimation and decomposition of wage inequality under a four-factor
//! nested CES technology with ICT capital-skill complementarity.
//!
//! The crate is organized around the pipeline
//! ingest -> instruments -> estimation -> decomposition:
//!
//! - [`model`]: closed-form technology evaluation, first-order conditions,
//!   factor demands, and Morishima elasticities;
//! - [`panel`]: CSV ingestion, labor composition/efficiency adjustment,
//!   interest rates, and rental prices of capital;
//! - [`instruments`]: shift-share (leave-one-out) and lagged instruments;
//! - [`estimation`]: joint GMM for the substitution parameters and
//!   country-specific technology trends, clustered covariance, J-test;
//! - [`decomposition`]: exact Shapley attribution of skill-premium and
//!   labor-demand changes;
//! - [`synth`]: a synthetic-data generator with known ground truth, and a
//!   Monte Carlo harness for estimator bias and coverage.
//!
//! Everything is deterministic given configuration and seed.

pub mod decomposition;
pub mod error;
pub mod estimation;
pub mod instruments;
pub mod model;
mod numeric;
pub mod panel;
pub mod synth;

pub use error::{Error, Result};

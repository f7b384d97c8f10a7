//! Budgeted outcome annotation for average-treatment-effect estimation.
//!
//! The crate plans which units should have their ground-truth outcome
//! revealed under an annotation budget, runs a two-batch cross-fitted
//! annotation campaign, and estimates the ATE with a doubly-robust score
//! that accounts for the designed missingness.
//!
//! Modules:
//! - [`data`]: units, datasets, CSV I/O, overlap diagnostics
//! - [`nuisance`]: learners and the outcome / variance / propensity / joint-score fits
//! - [`design`]: variance-optimal annotation probabilities and efficiency analytics
//! - [`crossfit`]: batch and fold assignment, out-of-fold nuisance bookkeeping
//! - [`estimator`]: AIPW, joint-score plug-in and external-weight estimators
//! - [`campaign`]: the resumable two-batch protocol
//! - [`sim`]: synthetic data generation and the Monte Carlo harness
//! - [`cli`]: the `batchcause` command-line front end

pub mod campaign;
pub mod cli;
pub mod crossfit;
pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod nuisance;
pub mod rng;
pub mod sim;
mod stats;

pub use error::{Error, Result};

//! Simulation and nonparametric jump-rate estimation for one-dimensional
//! piecewise-deterministic Markov processes, with a Monte-Carlo harness for
//! the TCP model and a pipeline for cell-lineage size data.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod estimators;
pub mod experiments;
pub mod model;
pub mod quadrature;
pub mod realdata;
pub mod simulate;
pub mod stats;
pub mod theory;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Theory(#[from] theory::TheoryError),
    #[error(transparent)]
    Simulate(#[from] simulate::SimulateError),
    #[error(transparent)]
    Estimate(#[from] estimators::EstimateError),
    #[error(transparent)]
    Experiment(#[from] experiments::ExperimentError),
    #[error(transparent)]
    RealData(#[from] realdata::RealDataError),
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

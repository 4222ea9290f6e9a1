//! Conditional neural control variates.
//!
//! Amortized, Stein-identity-based variance reduction for Monte Carlo
//! estimates of posterior expectations `E[h(x) | y]` in Bayesian inverse
//! problems. A permuted ensemble of hierarchical affine-coupling trees is
//! trained once on simulated `(x, y)` pairs; at inference time it supplies a
//! zero-mean control variate `g(x; y)` for any new observation without
//! retraining.

pub mod ad;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod problems;
pub mod report;
pub mod rng;
pub mod samplers;
pub mod tensor;
pub mod training;

pub use error::{AdError, Error, Result};

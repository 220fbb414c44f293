//! Sparse stochastic gating for conditional computation.
//!
//! This crate implements four families of gradient estimators for networks
//! with hard-threshold or stochastic binary units (an unbiased score-function
//! estimator with a minimum-variance baseline, the straight-through
//! estimator, a stochastic-times-smooth unit, and a noisy rectifier), exact
//! enumeration oracles to verify their statistical claims, and a gated
//! architecture in which a small gater network selects which columns of a
//! wide expert layer are computed at all. Sparsity is held near a target
//! rate by an adaptive penalty, and the saved multiply-accumulates are
//! accounted for explicitly.
//!
//! The `stogate` binary drives verification suites, estimator variance
//! benchmarks, training, and evaluation; see the crate README.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod math;
pub mod network;
pub mod noise;
pub mod oracle;
pub mod sparsity;
pub mod train;
pub mod units;
pub mod verify;

pub use error::{Error, Result};

//! Covariate-calibrated Wilcoxon two-sample inference.
//!
//! Provides the Wilcoxon two-sample statistic `U_jk`, its covariate-calibrated
//! version `U^C_jk`, variance estimation and asymptotic tests/confidence
//! intervals that stay valid under covariate-adaptive randomization, plus
//! assignment generators (simple, stratified permuted block, Pocock-Simon
//! minimization), Pitman ARE calculators, and a seeded Monte Carlo engine.
//!
//! With the default `parallel` feature the Monte Carlo replication loop runs
//! on rayon; without it everything falls back to a sequential loop with
//! identical output.

pub mod are;
pub mod calibration;
pub mod cli_io;
pub mod domain;
pub mod error;
pub mod inference;
pub mod randomization;
pub mod rank_core;
pub mod simlab;

pub use error::{Error, Result};

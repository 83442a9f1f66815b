//! Bayesian clustering of binary covariates with contamination and
//! cluster-level variable selection for regression.

pub mod config;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod gibbs;
pub mod io;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod special;
pub mod synth;

pub use error::{BaconError, Result};

//! Hierarchical aggregation of clustering-based linear predictors for
//! longitudinal visual-field series.
//!
//! Experts are linear TD trajectories whose slopes come from three sources
//! (patient-wise regression, temporal-shift regression within spatial
//! clusters, and slope clustering). Their intercepts are fit to the target
//! patient's observations, and an exponentially weighted forecaster combines
//! them either in one flat pool or per source first and then across sources.

pub mod aggregation;
pub mod clustering;
pub mod config;
pub mod engine;
pub mod evaluation;
pub mod error;
pub mod experts;
pub mod field;
pub mod io;
pub mod report;
pub mod seed;
pub mod synthdata;

pub use error::{Error, Result};

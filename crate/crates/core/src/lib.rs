//! Subjective neighborhoods on census-block graphs: a sequential
//! block-inclusion model, its Bayesian fit, posterior prediction, evaluation
//! against geographic baselines, and consensus communities.

pub mod consensus;
pub mod covariates;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod graph;
pub mod inference;
pub mod io;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

//! Differentially private linearized ADMM for distributed constrained
//! optimization with multiple local updates per round.

pub mod accounting;
pub mod applications;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mechanism;
pub mod penalty;
pub mod problem;
pub mod theory;

pub use error::{Error, Result};

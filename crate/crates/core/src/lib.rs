//! Physically realizable ensembles of Markovian open quantum systems: finding
//! them, checking them, and realizing them with adaptive monitoring.

pub mod algebra;
pub mod catalog;
pub mod constraints;
pub mod error;
mod lm;
pub mod measurement;
pub mod model;
pub mod solver;
pub mod symmetry;
pub mod trajectory;

pub use error::{Error, Result};

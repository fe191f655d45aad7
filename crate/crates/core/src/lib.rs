//! Determinantal point process machinery for selecting detection candidates.
//!
//! Candidate boxes are scored by a kernel that combines their detection
//! quality with pairwise similarity (learned features blended with spatial
//! overlap). The crate provides kernel construction, the sparse-score and
//! instance-aware losses with analytic gradients, greedy MAP inference with
//! an exhaustive oracle, an NMS baseline, a synthetic toy trainer and
//! detection evaluation metrics.

pub mod config;
pub mod dpp;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradients;
pub mod inference;
pub mod linalg;
pub mod matching;
pub mod losses;
pub mod scene;
pub mod synthetic;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

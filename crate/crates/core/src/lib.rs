//! Data-free image synthesis by inverting trained CNN classifiers.
//!
//! The crate trains small batch-normalized classifiers, freezes them, and
//! optimizes a per-batch conditional generator, a feature-pyramid
//! sub-generator and per-image channel scales so the synthesized batch drives
//! the frozen classifier toward chosen labels while matching its stored batch
//! normalization statistics. Downstream harnesses consume the synthesized
//! images for knowledge distillation, filter pruning and from-scratch
//! training, and generative-quality metrics score them against real data.

pub mod artifact;
pub mod classifier;
pub mod compress;
pub mod data;
pub mod engine;
pub mod error;
pub mod ftp;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod util;

pub use error::{Error, Result};

// Re-exported so downstream crates can name the tensor types that appear in
// public signatures without pinning their own copy.
pub use ndarray;

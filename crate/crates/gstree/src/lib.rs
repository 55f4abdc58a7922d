//! Generalized soft trees (GSTs): differentiable decision trees whose inner
//! nodes compute hyperplane or convolutional split scores and whose leaves are
//! linear models. A sample is routed softly - every leaf receives a weight
//! given by the product of sigmoid routing terms along its path - and the
//! prediction blends all leaf outputs by those weights.
//!
//! The crate covers the full lifecycle:
//!
//! - [`numerics`]: dense tensor kernels (forward + backward) the node
//!   functions are composed from,
//! - [`tree`]: topology, parameters, forward evaluation and leaf weights,
//! - [`objective`]: task losses and the two leaf-distribution penalties,
//! - [`trainer`]: mini-batch gradient training with manual backpropagation,
//!   Adam/AdamW, dropout, early stopping, and a finite-difference checker,
//! - [`grower`]: incremental growth by splitting the highest-loss leaf and
//!   training the new depth-1 subtree against the frozen rest of the tree,
//! - [`dataio`]: IDX/CSV ingestion, splits, normalization, model files,
//! - [`analysis`]: metrics (accuracy, AUC), leaf-concentration reporting,
//!   node-coefficient export, and feature visualization.

pub mod analysis;
pub mod dataio;
pub mod error;
pub mod grower;
pub mod numerics;
pub mod objective;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};

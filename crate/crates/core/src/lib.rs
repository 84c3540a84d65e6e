//! Graph neural networks with Kolmogorov–Arnold layers, and multi-teacher
//! knowledge amalgamation into graph-free students.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: a small reverse-mode autodiff tape over dense matrices.
//! * [`kan`]: B-spline bases and KAN layers.
//! * [`graph`]: sparse graphs, normalized adjacency, propagation, splits.
//! * [`models`]: the twelve architectures (teachers and students).
//! * [`amalgam`]: teacher attention, fused soft targets, distillation losses.
//! * [`trainer`]: Adam, early stopping, multi-seed runs.
//! * [`recipes`]: default training settings per architecture.
//! * [`datasets`]: on-disk dataset and checkpoint formats.
//! * [`bench`]: inference latency measurement.

pub mod amalgam;
pub mod bench;
pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod graph;
pub mod kan;
pub mod models;
pub mod recipes;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use sparse::CsrMatrix;
pub use tensor::Tensor;

//! NCART: residual networks of differentiable oblivious decision trees.
//!
//! Each block batch-normalizes its input, optionally projects it through a
//! learned sparse feature-selection matrix per tree, feeds it to an ensemble
//! of soft oblivious trees and averages their outputs with learned weights.
//! Blocks are stacked with identity skips; the last block selects features
//! and maps to the output dimension.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod layers;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod odt;
pub mod persist;
pub mod reference;
pub mod sparse;
pub mod train;

pub use config::{NcartConfig, Task};
pub use data::{Categories, Dataset, Labels, Schema};
pub use error::{NcartError, Result};
pub use layers::Mode;
pub use matrix::Matrix;
pub use persist::ModelFile;
pub use model::{Gradients, NcartBlock, NcartModel, RouteCounts, Targets, TreeParams};
pub use sparse::SparseFn;
pub use train::{FoldMetrics, TrainReport};

//! Architecture and training hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NcartError, Result};
use crate::sparse::SparseFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binclass,
    Multiclass,
    Regression,
}

impl Task {
    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Regression)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Binclass => "binclass",
            Task::Multiclass => "multiclass",
            Task::Regression => "regression",
        }
    }
}

impl FromStr for Task {
    type Err = NcartError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "binclass" | "binary" => Ok(Task::Binclass),
            "multiclass" => Ok(Task::Multiclass),
            "regression" => Ok(Task::Regression),
            other => Err(NcartError::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Allowed block counts.
pub const BLOCK_CHOICES: [usize; 2] = [2, 4];
/// Allowed trees per block.
pub const TREE_CHOICES: [usize; 4] = [8, 16, 32, 64];
/// Inclusive range of the selection dimension of the final block.
pub const SEL_DIM_RANGE: (usize, usize) = (2, 10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcartConfig {
    /// Number of blocks, including the final selection block.
    pub blocks: usize,
    /// Trees per block.
    pub trees: usize,
    /// Rows of each selection matrix in the final block.
    pub sel_dim: usize,
    /// Hidden width of each tree's leaf network; `None` means `max(n_features, 16)`.
    pub hidden: Option<usize>,
    pub sparse_fn: SparseFn,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random-search budget.
    pub trials: usize,
    pub folds: usize,
    /// Stop when the loss on a held-out 10% split has not improved for this
    /// many epochs; `None` trains for exactly `epochs`.
    pub early_stop_patience: Option<usize>,
    /// Wall-clock cap for one training or cross-validation run.
    pub timeout_secs: f64,
}

impl Default for NcartConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            trees: 16,
            sel_dim: 6,
            hidden: None,
            sparse_fn: SparseFn::Entmax,
            lr: 1e-3,
            batch_size: 1024,
            epochs: 1000,
            seed: 0,
            trials: 10,
            folds: 5,
            early_stop_patience: None,
            timeout_secs: 50_000.0,
        }
    }
}

impl NcartConfig {
    pub fn hidden_width(&self, n_features: usize) -> usize {
        self.hidden.unwrap_or_else(|| n_features.max(16))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NcartError::Config(msg));
        if !BLOCK_CHOICES.contains(&self.blocks) {
            return fail(format!("blocks must be one of {BLOCK_CHOICES:?}, got {}", self.blocks));
        }
        if !TREE_CHOICES.contains(&self.trees) {
            return fail(format!("trees must be one of {TREE_CHOICES:?}, got {}", self.trees));
        }
        if self.sel_dim < SEL_DIM_RANGE.0 || self.sel_dim > SEL_DIM_RANGE.1 {
            return fail(format!(
                "sel_dim must lie in [{}, {}], got {}",
                SEL_DIM_RANGE.0, SEL_DIM_RANGE.1, self.sel_dim
            ));
        }
        if self.hidden == Some(0) {
            return fail("hidden width must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return fail(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.early_stop_patience == Some(0) {
            return fail("early-stop patience must be positive".into());
        }
        if !(self.timeout_secs > 0.0) {
            return fail(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        Ok(())
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ncart_core::{SparseFn, Task};

#[derive(Debug, Parser)]
#[command(name = "ncart", version, about = "Train, evaluate and inspect NCART models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on the whole dataset and save it.
    Train(Flags),
    /// k-fold cross-validation report.
    Cv(Flags),
    /// Random search over the architecture; writes the best config file.
    Tune(Flags),
    /// Predict with a saved model.
    Predict(Flags),
    /// Feature importance of a saved model over a dataset.
    Importance(Flags),
    /// Finite-difference check of the backward pass over the extreme configurations.
    Gradcheck(GradcheckFlags),
    /// Fit two one-level oblivious trees to an axis-aligned tree.
    OdtApprox(OdtFlags),
}

/// Flags shared by the data commands. Anything left unset falls back to the
/// config file, then to `NCART_SEED` (seed only), then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Comma-separated categorical feature columns.
    #[arg(long, value_delimiter = ',')]
    pub cat_cols: Option<Vec<String>>,
    /// key=value file with the same names as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub sel_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = parse_sparse_fn)]
    pub sparse_fn: Option<SparseFn>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Early-stopping patience in epochs on a 10% validation split.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckFlags {
    /// First seed; seeds `seed..seed + seeds` are checked.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Coordinates sampled per block and tensor kind.
    #[arg(long, default_value_t = 5)]
    pub per_kind: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct OdtFlags {
    /// Tree description file.
    #[arg(long)]
    pub data: PathBuf,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: ncart_core::NcartError| e.to_string())
}

fn parse_sparse_fn(s: &str) -> Result<SparseFn, String> {
    s.parse().map_err(|e: ncart_core::NcartError| e.to_string())
}

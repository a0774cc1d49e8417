//! Run configuration: defaults, then `NCART_SEED`, then the config file,
//! then command-line flags, each layer overriding the previous one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ncart_core::{NcartConfig, Task};

use crate::args::Flags;
use crate::UsageError;

pub const SEED_ENV: &str = "NCART_SEED";

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub task: Option<Task>,
    pub cat_cols: Vec<String>,
    pub ncart: NcartConfig,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}


/// Config-file keys compare equal regardless of case, `-` and `_`.
fn canonical(key: &str) -> String {
    key.chars()
        .filter(|c| *c != '-' && *c != '_')
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| UsageError(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl RunConfig {
    /// Merges every layer and validates the result.
    pub fn resolve(flags: &Flags, env_seed: Option<&str>) -> Result<Self, UsageError> {
        let mut run = RunConfig::default();
        if let Some(seed) = env_seed {
            run.ncart.seed = parse(SEED_ENV, seed.trim())?;
        }
        if let Some(path) = &flags.config {
            let text = fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config file {}: {e}", path.display())))?;
            run.apply_file(&text, path)?;
        }
        run.apply_flags(flags);
        run.ncart.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(run)
    }

    pub fn apply_file(&mut self, text: &str, path: &Path) -> Result<(), UsageError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UsageError(format!("{}: line {}: expected key=value", path.display(), n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| UsageError(format!("{}: line {}: {}", path.display(), n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let c = &mut self.ncart;
        match canonical(key).as_str() {
            "data" => self.data = Some(value.into()),
            "target" => self.target = Some(value.to_string()),
            "task" => self.task = Some(parse(key, value)?),
            "catcols" => {
                self.cat_cols = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "seed" => c.seed = parse(key, value)?,
            "epochs" => c.epochs = parse(key, value)?,
            "batchsize" => c.batch_size = parse(key, value)?,
            "lr" => c.lr = parse(key, value)?,
            "blocks" => c.blocks = parse(key, value)?,
            "trees" => c.trees = parse(key, value)?,
            "seldim" => c.sel_dim = parse(key, value)?,
            "hidden" => c.hidden = if value == "auto" { None } else { Some(parse(key, value)?) },
            "sparsefn" => c.sparse_fn = parse(key, value)?,
            "folds" => c.folds = parse(key, value)?,
            "trials" => c.trials = parse(key, value)?,
            "timeout" => c.timeout_secs = parse(key, value)?,
            "patience" => c.early_stop_patience = if value == "none" { None } else { Some(parse(key, value)?) },
            "out" => self.out = Some(value.into()),
            "model" => self.model = Some(value.into()),
            "report" => self.report = Some(value.into()),
            _ => return Err(UsageError(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn apply_flags(&mut self, f: &Flags) {
        let c = &mut self.ncart;
        macro_rules! take {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        take!(f.seed, c.seed);
        take!(f.epochs, c.epochs);
        take!(f.batch_size, c.batch_size);
        take!(f.lr, c.lr);
        take!(f.blocks, c.blocks);
        take!(f.trees, c.trees);
        take!(f.sel_dim, c.sel_dim);
        take!(f.sparse_fn, c.sparse_fn);
        take!(f.folds, c.folds);
        take!(f.trials, c.trials);
        take!(f.timeout, c.timeout_secs);
        take!(f.cat_cols, self.cat_cols);
        if f.hidden.is_some() {
            c.hidden = f.hidden;
        }
        if f.patience.is_some() {
            c.early_stop_patience = f.patience;
        }
        if f.data.is_some() {
            self.data = f.data.clone();
        }
        if f.target.is_some() {
            self.target = f.target.clone();
        }
        if f.task.is_some() {
            self.task = f.task;
        }
        if f.out.is_some() {
            self.out = f.out.clone();
        }
        if f.model.is_some() {
            self.model = f.model.clone();
        }
        if f.report.is_some() {
            self.report = f.report.clone();
        }
    }

    pub fn require_data(&self) -> Result<&Path, UsageError> {
        self.data.as_deref().ok_or_else(|| UsageError("missing --data".into()))
    }

    pub fn require_target(&self) -> Result<&str, UsageError> {
        self.target.as_deref().ok_or_else(|| UsageError("missing --target".into()))
    }

    pub fn require_task(&self) -> Result<Task, UsageError> {
        self.task.ok_or_else(|| UsageError("missing --task".into()))
    }

    pub fn require_model(&self) -> Result<&Path, UsageError> {
        self.model.as_deref().ok_or_else(|| UsageError("missing --model".into()))
    }
}

/// The hyperparameters of `config` as a config file that [`RunConfig`] reads back.
pub fn config_file(config: &NcartConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "blocks={}", config.blocks);
    let _ = writeln!(s, "trees={}", config.trees);
    let _ = writeln!(s, "sel_dim={}", config.sel_dim);
    let _ = writeln!(s, "hidden={}", config.hidden.map_or("auto".to_string(), |h| h.to_string()));
    let _ = writeln!(s, "sparse_fn={}", config.sparse_fn);
    let _ = writeln!(s, "lr={}", config.lr);
    let _ = writeln!(s, "batch_size={}", config.batch_size);
    let _ = writeln!(s, "epochs={}", config.epochs);
    let _ = writeln!(s, "seed={}", config.seed);
    let _ = writeln!(s, "folds={}", config.folds);
    let _ = writeln!(s, "trials={}", config.trials);
    let _ = writeln!(
        s,
        "patience={}",
        config.early_stop_patience.map_or("none".to_string(), |p| p.to_string())
    );
    let _ = writeln!(s, "timeout={}", config.timeout_secs);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed = 5\n# comment\nbatch-size=64\n").unwrap();
        let mut flags = Flags {
            config: Some(path.clone()),
            ..Flags::default()
        };
        assert_eq!(RunConfig::resolve(&flags, Some("3")).unwrap().ncart.seed, 5);
        assert_eq!(RunConfig::resolve(&flags, Some("3")).unwrap().ncart.batch_size, 64);
        flags.seed = Some(9);
        assert_eq!(RunConfig::resolve(&flags, Some("3")).unwrap().ncart.seed, 9);
        let bare = Flags::default();
        assert_eq!(RunConfig::resolve(&bare, Some("3")).unwrap().ncart.seed, 3);
        assert_eq!(RunConfig::resolve(&bare, None).unwrap().ncart.seed, 0);
    }

    #[test]
    fn written_config_reads_back() {
        let config = NcartConfig {
            blocks: 4,
            trees: 32,
            sel_dim: 3,
            hidden: Some(12),
            lr: 0.0025,
            early_stop_patience: Some(20),
            ..NcartConfig::default()
        };
        let mut run = RunConfig::default();
        run.apply_file(&config_file(&config), Path::new("best.cfg")).unwrap();
        assert_eq!(run.ncart, config);
    }

    #[test]
    fn bad_entries_are_usage_errors() {
        let mut run = RunConfig::default();
        let p = Path::new("x.cfg");
        assert!(run.apply_file("trees", p).unwrap_err().0.contains("line 1"));
        assert!(run.apply_file("\nwidth=3", p).unwrap_err().0.contains("unknown key"));
        assert!(run.apply_file("trees=many", p).is_err());
        let flags = Flags {
            trees: Some(12),
            ..Flags::default()
        };
        assert!(RunConfig::resolve(&flags, None).is_err());
        assert!(RunConfig::resolve(&Flags::default(), Some("abc")).is_err());
    }
}

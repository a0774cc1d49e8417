//! `ncart` command-line tool. Exit codes: 0 success, 1 runtime or data
//! error (or a failed gradient check), 2 usage error.

mod args;
mod commands;
mod report;
mod settings;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Bad or missing arguments; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(f) => commands::train(f),
        Command::Cv(f) => commands::cv(f),
        Command::Tune(f) => commands::tune(f),
        Command::Predict(f) => commands::predict(f),
        Command::Importance(f) => commands::importance(f),
        Command::Gradcheck(f) => commands::gradcheck(f),
        Command::OdtApprox(f) => commands::odt_approx(f),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `ncart --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

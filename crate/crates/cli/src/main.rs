//! `mrn`: dataset generation, training, evaluation, ablation, attention
//! heatmaps and gradient checks.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mrn::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                mrn::Error::Numerical { .. } => 2,
                mrn::Error::Io { .. } => 3,
                _ => 1,
            },
        }
    }
}

fn run() -> Result<(), CliError> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Validation(e.to_string()))?;
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a, sub),
        Command::Eval(a) => commands::eval(a, sub),
        Command::Ablate(a) => commands::ablate(a, sub),
        Command::Viz(a) => commands::viz(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line surface of the `prerank` tool.
//!
//! Every command reads a JSON config (or a manifest written by an earlier
//! run), writes its outputs atomically into `--out`, and reports failures as
//! a single JSON line on stderr with a nonzero exit code:
//! 2 for configuration problems, 3 for data problems, 4 for numerical failures.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::commands::{Globals, NullFlags};
use crate::dataset::SplitName;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// One-line machine-readable form written to stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "prerank", version, about = "Pre-rank calibration diagnostics and regularized training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file, or a manifest.json from an earlier run
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Gaussian misspecification simulation and gate every pre-rank
    Simulate,
    /// Train the mixture hypernetwork, optionally selecting lambda on validation data
    Train,
    /// Score a checkpoint on one data split
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
    },
    /// Simulate the PCE null distribution under perfect calibration
    Nulldist {
        /// Number of PIT values per replicate
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Ensemble size M of the PITs being gated
        #[arg(long)]
        discretization: Option<usize>,
        #[arg(long)]
        grid_levels: Option<usize>,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            let err = CliError::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.to_json_line());
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    match cli.command {
        Command::Simulate => commands::simulate(&g),
        Command::Train => commands::train_cmd(&g),
        Command::Evaluate { checkpoint, split } => commands::evaluate_cmd(&g, checkpoint, split),
        Command::Nulldist {
            n,
            replicates,
            discretization,
            grid_levels,
        } => commands::nulldist(
            &g,
            &NullFlags {
                n,
                replicates,
                discretization,
                grid_levels,
            },
        ),
    }
}

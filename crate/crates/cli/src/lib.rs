//! `cpolab`: the pipeline as a command-line tool.
//!
//! Every command resolves a [`config::Settings`] from defaults, an optional
//! `--config` file, `CPOLAB_*` environment variables and flags, then writes
//! its outputs plus a `<stem>.resolved.toml` snapshot. Exit codes: 0 success,
//! 1 runtime error, 2 validation failure, 3 selfcheck failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<cpolab_core::Error> for CliError {
    fn from(e: cpolab_core::Error) -> Self {
        use cpolab_core::Error as E;
        let code = match e {
            E::Io { .. } | E::Diverged { .. } | E::Json(_) => EXIT_RUNTIME,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Layering flags shared by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat TOML configuration file (a previous run's snapshot works too).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Ignore `CPOLAB_*` environment variables.
    #[arg(long, global = true)]
    pub no_env: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and annotate a synthetic dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: supervised fine-tuning on attribute-labelled data.
    TrainSft {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: preference alignment starting from an SFT checkpoint.
    #[command(alias = "train-cpo")]
    TrainAlign {
        #[arg(long)]
        sft: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// cpo, cpo-s, dpo, dpo-scalar or dpo-binary.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        omega_w: Option<f64>,
        #[arg(long)]
        omega_l: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint as JSONL.
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Total samples, split evenly across the requested families.
        #[arg(long)]
        n: Option<usize>,
        /// Restrict to one family (RING or GRID); default both.
        #[arg(long)]
        family: Option<String>,
        /// Comma-separated pair ids requested positive.
        #[arg(long, value_delimiter = ',')]
        pos: Vec<String>,
        /// Comma-separated pair ids requested negative.
        #[arg(long, value_delimiter = ',')]
        neg: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Content-only evaluation: mean #A_neg with a bootstrap interval.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Total samples, split evenly across prompt families.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset whose validation split is used for conditioning IoU.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank evaluation reports and flag overlapping intervals.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smoothed loss curves and stability summary from an alignment log.
    Curves {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Analytic identities and gradient checks; exit 3 on any failure.
    Selfcheck {
        /// Criterion-sized sample counts on the small probe network only.
        #[arg(long)]
        fast: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attribute taxonomy utilities.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum TaxonomyAction {
    /// Check a tree document; exit 2 on violations.
    Validate { file: Option<PathBuf> },
    /// Print the built-in tree as JSON.
    Show,
}

#[derive(Debug, Parser)]
#[command(
    name = "cpolab",
    version,
    about = "Attribute-aware preference alignment of a toy diffusion model"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Parse and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let root = match Cli::try_parse_from(args) {
        Ok(r) => r,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    let env: Vec<(String, String)> = if root.common.no_env {
        Vec::new()
    } else {
        std::env::vars().collect()
    };
    match commands::run(root.command, &root.common, env) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

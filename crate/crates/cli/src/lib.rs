// SPDX-License-Identifier: MIT OR Apache-2.0

//! `saesteer` command-line driver: config handling, batch commands over
//! model / SAE / record files, and a small REPL.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod repl;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use saesteer::scoring::ScoreMode;
use saesteer::steering::SpliceMode;

pub use commands::{run, Command, EFFECTIVE_CONFIG};
pub use config::{parse_config, read_config, Overrides, RunConfig};
pub use error::{CliError, CliResult, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Exact,
    Fast,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SpliceArg {
    Reconstruct,
    Delta,
}

#[derive(Debug, Parser)]
#[command(name = "saesteer", version, about = "Score and steer sparse-autoencoder features")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// SAE container directory; repeat once per layer.
    #[arg(long)]
    sae: Vec<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    splice: Option<SpliceArg>,
    /// Inclusive layer range `a..b`, or a single layer.
    #[arg(long, value_parser = config::parse_layers)]
    layers: Option<[usize; 2]>,
    /// Single output-score threshold for `filter-report`.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Args {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            sae: self.sae.clone(),
            records: self.records.clone(),
            out: self.out.clone(),
            seed: self.seed,
            parallelism: self.parallelism,
            mode: self.mode.map(|m| match m {
                ModeArg::Exact => ScoreMode::Exact,
                ModeArg::Fast => ScoreMode::Fast,
            }),
            splice: self.splice.map(|s| match s {
                SpliceArg::Reconstruct => SpliceMode::Reconstruct,
                SpliceArg::Delta => SpliceMode::Delta,
            }),
            layers: self.layers,
            threshold: self.threshold,
        }
    }
}

/// Resolves the config (defaults, then file, then flags) and runs.
pub fn run_args<I, T>(args: I) -> CliResult<commands::Command>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(args).map_err(|e| CliError::config("usage", e.to_string()))?;
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    args.overrides().apply(&mut cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| run(args.command, &cfg))?;
    Ok(args.command)
}

/// Entry point for the binary; returns the process exit status. Errors go
/// to standard error as one JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<T> = args.into_iter().collect();
    // help and version are not errors
    if let Err(e) = Args::try_parse_from(args.clone()) {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            print!("{e}");
            return EXIT_OK;
        }
    }
    match run_args(args) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

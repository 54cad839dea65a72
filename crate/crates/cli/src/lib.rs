//! Batch frontend for `optfolio`: reads a TOML run configuration, runs one
//! pipeline and writes CSV and JSON results.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "optfolio", version, about = "Optimal portfolios and portfolio compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate the density, prices and optimal wealth; write per-time summaries.
    Simulate,
    /// Calibrate and replicate the optimal claim; write the replication report.
    Replicate,
    /// Enumerate subsets for every m' <= m; write the selection report.
    Select,
    /// Run every applicable check; exit 3 if any fails.
    Verify,
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config PATH is required"))?;
    let mut cfg = RunConfig::load(path, cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Replicate => commands::replicate(&cfg),
        Command::Select => commands::select(&cfg),
        Command::Verify => commands::verify(&cfg),
    })
}

//! Batch front-end for the hypergradient experiments.
//!
//! Each subcommand reads an optional TOML config (defaults otherwise),
//! applies command-line overrides, runs the experiment and writes CSV, JSON
//! and SVG files to the output directory.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod plots;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "hypergrad", version, about = "Nyström, CG and Neumann hypergradient experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare approximate inverses of a rank-deficient PSD matrix.
    InvertDemo(CommonArgs),
    /// Weight-decay tuning of logistic regression across backends.
    Logreg(CommonArgs),
    /// Pipeline hypergradients against the closed form on quadratic tasks.
    QuadraticOracle(CommonArgs),
    /// Check measured hypergradient errors against the error bound.
    BoundCheck(CommonArgs),
    /// Time one hypergradient per backend and size.
    Bench(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip SVG figures.
    #[arg(long)]
    pub no_plots: bool,
}

impl Command {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            Command::InvertDemo(_) => ExperimentKind::InvertDemo,
            Command::Logreg(_) => ExperimentKind::Logreg,
            Command::QuadraticOracle(_) => ExperimentKind::QuadraticOracle,
            Command::BoundCheck(_) => ExperimentKind::BoundCheck,
            Command::Bench(_) => ExperimentKind::Bench,
        }
    }

    pub fn args(&self) -> &CommonArgs {
        match self {
            Command::InvertDemo(a)
            | Command::Logreg(a)
            | Command::QuadraticOracle(a)
            | Command::BoundCheck(a)
            | Command::Bench(a) => a,
        }
    }
}

/// Resolves the effective config for a subcommand.
pub fn resolve_config(command: &Command) -> CliResult<ExperimentConfig> {
    let args = command.args();
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => command.kind().default_config(),
    };
    if cfg.kind() != command.kind() {
        return Err(CliError::Config(format!(
            "config describes experiment `{}` but the subcommand is `{}`",
            cfg.kind().name(),
            command.kind().name()
        )));
    }
    if args.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    cfg.override_with(args.output.clone(), args.seeds.clone(), args.jobs);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line; the config actually used is saved next to the outputs.
pub fn execute(cli: &Cli) -> CliResult<experiments::Written> {
    let cfg = resolve_config(&cli.command)?;
    output::ensure_dir(cfg.output_dir())?;
    let echo = cfg.output_dir().join("config.toml");
    std::fs::write(&echo, cfg.to_toml()?).map_err(|e| CliError::io(&echo, e))?;
    let mut written = experiments::run(&cfg, !cli.command.args().no_plots)?;
    written.files.insert(0, echo);
    Ok(written)
}

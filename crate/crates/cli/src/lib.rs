//! Command-line front end: dataset ingestion and synthesis, training,
//! tuning, evaluation and explanation runs stored as plain directories.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

pub use commands::Globals;
pub use config::RunConfig;

/// Thread cap for the worker pool.
pub const THREADS_ENV: &str = "NOWCAST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Interpretable spatiotemporal precipitation forecasting")]
pub struct Cli {
    /// Run configuration file (`key=value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a manifest and long-format CSV into a dataset bundle.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Generate a planted-signal dataset bundle.
    Synth {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train a model on a bundle.
    Train {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Search hyperparameters on a bundle and refit the winner.
    Tune {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Recompute test metrics of a run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the explanation methods on a trained run.
    Explain {
        #[arg(long)]
        run: PathBuf,
    },
    /// Ranked tables and the attention grid from an explained run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        set: cli.set,
    };
    match cli.command {
        Command::Ingest { manifest, csv } => commands::ingest(&g, &manifest, &csv),
        Command::Synth { spec } => commands::synth(&g, &spec),
        Command::Train { bundle } => commands::train(&g, &bundle),
        Command::Tune { bundle } => commands::tune_cmd(&g, &bundle),
        Command::Evaluate { run } => commands::evaluate_cmd(&g, &run),
        Command::Explain { run } => commands::explain(&g, &run),
        Command::Report { run } => commands::report(&g, &run),
    }
}

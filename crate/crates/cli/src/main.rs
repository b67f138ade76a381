mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

/// Multiphase estimation with two photons in a 4-arm interferometer.
#[derive(Debug, Parser)]
#[command(name = "qmetro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to QMETRO_THREADS, then the config.
    #[arg(long, global = true, env = "QMETRO_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantum and classical bounds, minimum search, densities and slices.
    Bounds,
    /// Adaptive estimation campaign.
    Estimate,
    /// Synthetic characterization and model fit.
    Calibrate,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve(cli)?;
    if let Some(n) = config.threads {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Bounds => commands::bounds(&config),
        Command::Estimate => commands::estimate(&config),
        Command::Calibrate => commands::calibrate(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qmetro: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

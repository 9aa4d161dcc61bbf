use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sts_cli::config::RunConfig;
use sts_cli::pipeline::{output_dir, run_stage, Stage};

/// Robust finite-horizon LQR synthesis for sit-to-stand maneuvers.
#[derive(Parser)]
#[command(name = "sts", version)]
struct Cli {
    /// JSON run configuration; defaults reproduce the standard setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for both the weight search and the Monte Carlo draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the search and Monte Carlo stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reference trajectory and allocated inputs.
    Plan,
    /// LQR gains for the configured (or reference) weights.
    Gains,
    /// Latin-hypercube weight search; writes the best gains.
    Search,
    /// Nominal run and Monte Carlo over the parameter box.
    Simulate,
    /// SVG plots of states, inputs and CoM trajectories.
    Report,
    /// plan, search, simulate and report in sequence.
    All,
    /// Print the effective configuration as JSON.
    Config,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.workers == Some(0) {
        anyhow::bail!("--workers must be at least 1");
    }
    let out = output_dir(&cfg, cli.out.clone());
    let stages: &[Stage] = match cli.command {
        Command::Plan => &[Stage::Plan],
        Command::Gains => &[Stage::Gains],
        Command::Search => &[Stage::Search],
        Command::Simulate => &[Stage::Simulate],
        Command::Report => &[Stage::Report],
        Command::All => &[Stage::Plan, Stage::Search, Stage::Simulate, Stage::Report],
        Command::Config => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
    };
    for &stage in stages {
        let line = run_stage(&cfg, &out, stage, cli.workers).context("pipeline failed")?;
        println!("{line}");
    }
    Ok(())
}

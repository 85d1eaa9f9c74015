//! `drsac` — dataset generation, offline training, perturbation sweeps, and
//! the randomized verification suite.
//!
//! Every subcommand reads a flat `key=value` config file; `--seed` overrides
//! the config's seed so all randomness flows from one flag. Exit codes:
//! 0 success, 1 I/O, 2 config error, 3 verification failure, 4 numerical
//! abort.

use clap::{Parser, Subcommand};
use drsac_core::commands::{self, CommandError, KvConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drsac", version, about = "Distributionally robust soft actor-critic toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline pendulum dataset with an epsilon-greedy behavior policy.
    GenDataset {
        /// Config file (keys: out, n, eps, seed, behavior, snapshot, ...).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train SAC (delta=0) or DR-SAC (delta>0) on a dataset.
    Train {
        /// Config file (keys: dataset, out_dir, steps, delta, gamma, ...).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint over a perturbation grid, writing a CSV.
    Eval {
        /// Config file (keys: checkpoint, out, episodes, sweep_length, ...).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the randomized property suite; nonzero exit on any failure.
    Verify {
        /// Optional config file (keys: seed, out).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: Option<&PathBuf>, seed: Option<u64>) -> Result<KvConfig, CommandError> {
    let mut cfg = match config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set("seed", s.to_string());
    }
    Ok(cfg)
}

fn run() -> Result<(), CommandError> {
    match Cli::parse().command {
        Command::GenDataset { config, seed } => {
            let (path, stats) = commands::cmd_gen_dataset(load(Some(&config), seed)?)?;
            println!(
                "wrote {} transitions ({} episodes, {} random actions) to {}",
                stats.transitions,
                stats.episodes,
                stats.random_actions,
                path.display()
            );
        }
        Command::Train { config, seed } => {
            let summary = commands::cmd_train(load(Some(&config), seed)?)?;
            println!(
                "trained {} steps; metrics at {}, checkpoint at {}",
                summary.steps_completed,
                summary.metrics_path.display(),
                summary.checkpoint_path.display()
            );
        }
        Command::Eval { config, seed } => {
            let out = commands::cmd_eval(load(Some(&config), seed)?)?;
            println!("sweep written to {}", out.display());
        }
        Command::Verify { config, seed, out } => {
            let mut cfg = load(config.as_ref(), seed)?;
            if let Some(path) = out {
                cfg.set("out", path.display().to_string());
            }
            let report = commands::cmd_verify(cfg)?;
            println!(
                "all {} properties passed (seed {})",
                report.results.len(),
                report.seed
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

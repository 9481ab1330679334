mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "neuroslice", version, about = "Entropy slice selection and transfer-learning evaluation pipeline")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides the training and fold seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed-order gradient reductions; outputs become byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Rank slices by entropy and write one selection file per subject.
    Select,
    /// Train on a generated auxiliary cohort and write a weight container.
    Pretrain,
    /// Cross-validate the configured model and regime.
    TrainEval,
    /// Entropy versus random slice selection over several seeds.
    Compare,
    /// Merge report files into one table next to published reference rows.
    Report {
        #[arg(required = false)]
        paths: Vec<PathBuf>,
    },
    /// Write a synthetic cohort (manifest plus volumes).
    Synth,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.cv.seed = seed;
        if let Some(p) = cfg.pretrain.as_mut() {
            p.train.seed = seed;
        }
    }
    cfg.train.deterministic = cli.deterministic;
    if let Some(p) = cfg.pretrain.as_mut() {
        p.train.deterministic = cli.deterministic;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let needs_config = !matches!(cli.verb, Verb::Report { .. });
    if needs_config && cli.config.is_none() {
        anyhow::bail!("--config is required for this command");
    }
    let cfg = load_config(&cli)?;
    match &cli.verb {
        Verb::Select => commands::select(&cfg),
        Verb::Pretrain => commands::pretrain(&cfg),
        Verb::TrainEval => commands::train_eval(&cfg),
        Verb::Compare => commands::compare(&cfg),
        Verb::Report { paths } => commands::report(&cfg, paths),
        Verb::Synth => commands::synth(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

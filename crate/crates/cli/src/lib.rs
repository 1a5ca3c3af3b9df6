//! Command-line front end for `oov-core`: dataset generation, splitting,
//! training, evaluation, embedder comparison and sensitivity sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use oov_core::embedders::EmbedderKind;
use oov_core::eval::Subset;
use oov_core::toy::ToyConfig;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "oovrec", version, about = "Out-of-vocabulary embedders for recommenders")]
pub struct Cli {
    /// Worker threads for parallel evaluation, sweeps and comparisons.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config and OOV_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic clustered dataset and a matching run config.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split the interaction log by time and write the manifest and partitions.
    PrepareSplit(Common),
    /// Train on a prepared split and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the requested subsets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Repeatable; defaults to the config's subsets.
        #[arg(long = "subset")]
        subsets: Vec<Subset>,
    },
    /// Train and evaluate several embedders under the same seeds.
    CompareEmbedders {
        #[command(flatten)]
        common: Common,
        /// Comma-separated embedder kinds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        embedders: Vec<EmbedderKind>,
        /// Comma-separated seeds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// One-at-a-time sweep over the config's grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_seed(common.seed)?;
    if let Some(out) = &common.out {
        cfg.out.clone_from(out);
    }
    Ok(cfg)
}

fn toy_config(path: Option<&PathBuf>, seed: Option<u64>) -> CliResult<ToyConfig> {
    let mut cfg = match path {
        None => ToyConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid toy config {}: {e}", p.display())))?
        }
    };
    let env = std::env::var(config::SEED_ENV).ok().and_then(|s| s.trim().parse().ok());
    if let Some(s) = seed.or(env) {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenToy { out, config, seed } => commands::gen_toy(&toy_config(config.as_ref(), *seed)?, out),
        Command::PrepareSplit(c) => commands::prepare_split(&load(c)?),
        Command::Train(c) => commands::train(&load(c)?),
        Command::Evaluate {
            common,
            checkpoint,
            subsets,
        } => commands::evaluate(&load(common)?, checkpoint.as_deref(), subsets),
        Command::CompareEmbedders { common, embedders, seeds } => commands::compare(&load(common)?, embedders, seeds),
        Command::Sweep { common, seeds } => commands::run_sweep(&load(common)?, seeds).map(|(msg, _)| msg),
    }
}

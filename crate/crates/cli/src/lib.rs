//! Command-line front end: experiment configs, the checkpoint container and
//! CSV/JSON report emission.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{StageArg, TheoryCheckArg};
use crate::config::{ExperimentConfig, SEED_ENV};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "uniattn", version, about = "Softmax unification experiments on a toy decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-layer attention similarity of the Baseline model.
    ProfileSimilarity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form W_c init; writes a checkpoint and per-layer errors.
    InitCompensation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stage 1 (W_c only), stage 2 (all weights) or both in sequence.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// KV retain rate, Softmax count, FLOPs and eval loss per variant.
    CompareVariants {
        #[arg(long)]
        config: PathBuf,
    },
    /// Numeric checks; exits with status 5 if any fails.
    VerifyTheory {
        #[arg(long, value_enum, default_value = "all")]
        check: TheoryCheckArg,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Experiment config for the depth check and the output directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory when no config is given.
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Traced activations of the first training sequences.
    DumpActivations {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        sequences: usize,
    },
}

fn context(path: &Path) -> Result<commands::Context> {
    commands::Context::new(ExperimentConfig::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ProfileSimilarity { config } => commands::profile_similarity(&context(&config)?),
        Command::InitCompensation { config } => commands::init_compensation_cmd(&context(&config)?),
        Command::Train { config, stage } => commands::train(&context(&config)?, stage),
        Command::CompareVariants { config } => commands::compare_variants(&context(&config)?),
        Command::VerifyTheory { check, seed, config, output_dir } => {
            let ctx = config.as_deref().map(context).transpose()?;
            let out = ctx.as_ref().map_or(output_dir, |c| c.cfg.output_dir.clone());
            commands::verify_theory(check, seed, ctx.as_ref(), &out).map(|_| ())
        }
        Command::DumpActivations { config, sequences } => commands::dump_activations(&context(&config)?, sequences),
    }
}

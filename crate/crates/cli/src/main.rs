//! Command-line front end: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing or mismatched
//! artifact, 3 configuration error, 4 numerical failure.

mod artifacts;
mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{CliConfig, ConfigError};
use crate::stages::Ctx;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input {}", .0.display())]
    Missing(PathBuf),
    #[error("expected {} but found {} from another configuration; rerun the producing stage or pass --force", .expected.display(), .found.display())]
    Mismatch { expected: PathBuf, found: PathBuf },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lib(#[from] bcsi::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) | CliError::Mismatch { .. } => 2,
            CliError::Config(_) => 3,
            CliError::Lib(e) if e.is_numerical() => 4,
            CliError::Lib(bcsi::Error::InvalidArgument { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bcsi", version, about = "Bias-conflicting sample detection and fine-tuning")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory [default: output.dir, else `out`].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; derives the data, model and detector seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Accept inputs produced under a different configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or load the training and test sets.
    Gen,
    /// Train the ERM model.
    Train,
    /// Score the training set with BCSI, once per run seed.
    Score,
    /// Select the pivotal set from the scores.
    Pivotal,
    /// Fine-tune the ERM model on the pivotal set.
    Finetune,
    /// Evaluate both models and write the report.
    Eval,
    /// All stages in order.
    Pipeline,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_master_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(ConfigError::new("--jobs", "must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| ConfigError::new("--jobs", e.to_string()))?;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx::new(cfg, out, cli.force)?;
    match cli.command {
        Command::Gen => stages::gen(&ctx).map(drop),
        Command::Train => stages::train(&ctx).map(drop),
        Command::Score => stages::score(&ctx).map(drop),
        Command::Pivotal => stages::pivotal(&ctx).map(drop),
        Command::Finetune => stages::finetune_stage(&ctx).map(drop),
        Command::Eval => stages::eval(&ctx).map(drop),
        Command::Pipeline => stages::pipeline(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

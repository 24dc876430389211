//! `ipr`: generate datasets, train, evaluate, verify the sampler and run
//! over-squashing diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ipr_core::Error as CoreError;

/// Bad flags, config values or overrides (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Checkpoint parameters that do not fit the configured model (exit code 4).
#[derive(Debug)]
pub struct CheckpointMismatch(pub Vec<String>);

impl std::fmt::Display for CheckpointMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "checkpoint does not match the model:")?;
        for line in &self.0 {
            write!(f, "\n  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CheckpointMismatch {}

#[derive(Parser)]
#[command(name = "ipr", version, about = "Implicitly rewired message passing")]
struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a generated dataset as train/val/test JSONL plus a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Config overrides such as `--model.m=4`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train and write checkpoints plus a metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// End this invocation after epoch N; the schedule still spans `optim.epochs`.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint over repeated assignment draws.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: commands::Split,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Check the exactly-k sampler against brute-force enumeration.
    VerifySampler {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Effective resistance before/after rewiring and layer sensitivity.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: commands::Split,
        /// Only the first `limit` graphs of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let _ = cli.threads;
    match cli.command {
        Command::Gen { config, out, force, overrides } => {
            commands::gen(&config::ExperimentConfig::load(&config, &overrides)?, out, force)
        }
        Command::Train { config, resume, stop_after, overrides } => {
            commands::train(&config::ExperimentConfig::load(&config, &overrides)?, resume.as_deref(), stop_after)
        }
        Command::Eval { config, checkpoint, repeats, split, overrides } => {
            commands::eval(&config::ExperimentConfig::load(&config, &overrides)?, &checkpoint, repeats, split)
        }
        Command::VerifySampler { m, k, trials, seed } => commands::verify_sampler(m, k, trials, seed),
        Command::Diagnose { config, checkpoint, split, limit, overrides } => {
            commands::diagnose(&config::ExperimentConfig::load(&config, &overrides)?, &checkpoint, split, limit)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<CheckpointMismatch>().is_some() {
        return 4;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Divergence(_)) => 3,
        Some(CoreError::Checkpoint(_)) => 4,
        Some(CoreError::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

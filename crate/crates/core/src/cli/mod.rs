//! Command-line workflow: synth, prepare, train, eval, explain.
//!
//! One binary, five subcommands, one config file. Every command writes the
//! fully resolved configuration into its output directory before doing
//! anything else, and failures surface as a single `error: ...` line on
//! stderr with a nonzero exit code.

mod commands;
mod config;

pub use config::{PathsConfig, RunConfig};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::explain::ExplainError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::numerics::Precision;
use crate::signal::SignalError;
use crate::synth::SynthError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("training aborted on non-finite values at epoch {0}; partial artifacts were written")]
    TrainAborted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "somnivit",
    version,
    about = "Sleep stage and apnea classification on synthetic wearable biosignals"
)]
pub struct Cli {
    /// TOML run configuration; omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config file everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this command, overriding the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Element type: f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Suppress progress output; errors still reach stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic raw cohort.
    Synth,
    /// Segment, resample, and normalize a raw cohort into an archive, and
    /// split its subjects into train/val/test.
    Prepare {
        /// Raw cohort directory (default: the configured raw_dir).
        #[arg(long, value_name = "DIR")]
        raw: Option<PathBuf>,
    },
    /// Train on the archive's train split, validating on val.
    Train {
        /// Archive directory (default: the configured archive_dir).
        #[arg(long, value_name = "DIR")]
        archive: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: JSON reports, confusion CSVs, text tables.
    Eval {
        /// Checkpoint file (default: best.ckpt in the configured train_dir).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        archive: Option<PathBuf>,
        /// Which split to score.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Write attention overlays for chosen segments.
    Explain {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        archive: Option<PathBuf>,
        /// Segment to explain, as <subject_id>/<segment_index>. Repeatable.
        #[arg(long = "segment", value_name = "SUBJECT/INDEX", required = true)]
        segments: Vec<String>,
        /// Comma-separated channel names (default: all four).
        #[arg(long, value_name = "LIST")]
        channels: Option<String>,
        /// Encoder layer to read attention from (default: the last).
        #[arg(long)]
        layer: Option<usize>,
    },
}

/// Flattens an error chain into the one-line form the binary prints.
pub fn error_line(err: &CliError) -> String {
    err.to_string().replace('\n', "; ")
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.resolve(cli.seed, cli.precision);
    config.validate()?;

    let quiet = cli.quiet;
    match cli.command {
        Command::Synth => {
            let out = cli.out.unwrap_or_else(|| config.paths.raw_dir.clone());
            commands::cmd_synth(&config, &out, quiet)
        }
        Command::Prepare { raw } => {
            let raw = raw.unwrap_or_else(|| config.paths.raw_dir.clone());
            let out = cli.out.unwrap_or_else(|| config.paths.archive_dir.clone());
            commands::cmd_prepare(&config, &raw, &out, quiet)
        }
        Command::Train { archive } => {
            let archive = archive.unwrap_or_else(|| config.paths.archive_dir.clone());
            let out = cli.out.unwrap_or_else(|| config.paths.train_dir.clone());
            commands::cmd_train(&config, &archive, &out, quiet)
        }
        Command::Eval { checkpoint, archive, split } => {
            let checkpoint =
                checkpoint.unwrap_or_else(|| config.paths.train_dir.join("best.ckpt"));
            let archive = archive.unwrap_or_else(|| config.paths.archive_dir.clone());
            let out = cli.out.unwrap_or_else(|| config.paths.eval_dir.clone());
            commands::cmd_eval(&config, &archive, &checkpoint, split, &out, quiet)
        }
        Command::Explain { checkpoint, archive, segments, channels, layer } => {
            let checkpoint =
                checkpoint.unwrap_or_else(|| config.paths.train_dir.join("best.ckpt"));
            let archive = archive.unwrap_or_else(|| config.paths.archive_dir.clone());
            let out = cli.out.unwrap_or_else(|| config.paths.explain_dir.clone());
            commands::cmd_explain(
                &config,
                &archive,
                &checkpoint,
                &segments,
                channels.as_deref(),
                layer,
                &out,
                quiet,
            )
        }
    }
}

/// Entry point for the binary: parse, run, report.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}

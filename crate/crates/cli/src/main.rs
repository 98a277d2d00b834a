//! `merank`: synthetic worlds, anchor building, streaming runs and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use merank_core::memory::MemoryError;
use merank_core::pipeline::PipelineError;
use merank_core::records::RecordError;

use config::Tuning;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Backend(_) => 3,
        }
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MemoryError> for CliError {
    fn from(e: MemoryError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Backend { .. } => Self::Backend(e.to_string()),
            PipelineError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "merank", version, about = "Memory-backed test-time re-ranking of quality scores")]
pub struct Cli {
    /// Flat key=value config file (default: $MERANK_CONFIG)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world split into anchors and queries
    Synth {
        #[arg(long)]
        n: usize,
        /// Generator seed (env MERANK_SEED)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = merank_core::synth::DEFAULT_ANCHOR_FRAC)]
        anchor_frac: f64,
        #[arg(long, default_value_t = merank_core::synth::DEFAULT_CONTENT_DIM)]
        content_dim: usize,
        /// Output directory (world.jsonl, anchors.jsonl, queries.jsonl)
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and seal the anchor memory from a labeled dataset
    BuildAnchors {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Re-rank a query stream online
    Run {
        #[arg(long)]
        stream: PathBuf,
        /// Anchor memory bank
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Contrast memory to resume from
        #[arg(long)]
        cm_in: Option<PathBuf>,
        /// Where to save the final contrast memory
        #[arg(long)]
        cm_out: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Score result files against their ground truth
    Eval {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = merank_core::metrics::DEFAULT_HIST_BINS)]
        hist_bins: usize,
    },
    /// Rerun a stream under seeded permutations and summarize the spread
    PermuteEval {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        am: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = merank_core::metrics::DEFAULT_HIST_BINS)]
        hist_bins: usize,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Serve the simulated backend over the HTTP wire protocol
    ServeSim {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Rerun the command recorded in a manifest and compare output hashes
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match commands::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

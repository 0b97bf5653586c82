//! `ndcr`: generate data, train, evaluate, gradient-check and inspect.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data-format error,
//! 3 numeric failure (non-finite values or a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndcr::{Ablation, Error};

#[derive(Parser)]
#[command(
    name = "ndcr",
    version,
    about = "Divide-and-conquer reasoning head for compound-text image retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every model block.
    Gradcheck(GradcheckArgs),
    /// Describe a checkpoint or dataset file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Master seed of the instances.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    attributes: Option<usize>,
    /// Comma-separated relative weights of counts 1..=5.
    #[arg(long, value_parser = config::parse_weights)]
    count_weights: Option<Weights>,
    #[arg(long)]
    negation_prob: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Seed of the frozen encoders; splits of one benchmark share it.
    #[arg(long)]
    encoder_seed: Option<u64>,
}

/// Keeps clap from treating the parsed list as repeated values.
type Weights = Vec<f64>;

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Checkpoint path; the run description goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics, one JSON object per line. Defaults to
    /// `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Report path. Defaults to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Restrict to these modules.
    #[arg(long)]
    module: Vec<ndcr::gradcheck::Module>,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 1,
            Error::Format { .. } | Error::Dimension(_) | Error::Io(_) => 2,
            Error::MissingParam(_) | Error::DuplicateParam(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::Invalid(_) => 2,
            Error::Shape { .. } | Error::MissingGradient(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! `tensorized`: train, evaluate, verify and analyze tensorized transformer
//! language models.
//!
//! Exit codes: 0 success, 1 property failure or numeric divergence,
//! 2 configuration / I/O / usage error, 3 checkpoint or vocabulary
//! incompatibility.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tensorized::attention::{AttentionKind, AttentionMode};
use tensorized::verify::Suite;

use crate::config::Format;

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn property(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn compat(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<tensorized::Error> for Failure {
    fn from(e: tensorized::Error) -> Self {
        use tensorized::Error as E;
        let code = match &e {
            E::Diverged { .. } | E::Numeric(_) => 1,
            E::Format { field, .. } if field == "version" => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tensorized", version, about = "Multi-linear attention language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a language model on a text corpus.
    Train(TrainArgs),
    /// Report perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the executable property suites.
    Verify(VerifyArgs),
    /// Parameter counts, compression ratios and FLOPs for a configuration.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct ModelOverrides {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<AttentionArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum AttentionArg {
    MultiLinear,
    MultiHead,
}

impl From<AttentionArg> for AttentionKind {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::MultiLinear => AttentionKind::MultiLinear,
            AttentionArg::MultiHead => AttentionKind::MultiHead,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Chunked,
    Sum,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Chunked => AttentionMode::Chunked,
            ModeArg::Sum => AttentionMode::Sum,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Text corpus (overrides the config).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for metrics, checkpoints and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[command(flatten)]
    model: ModelOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Part of the corpus to score; `val` and `train` use the same split as
    /// training.
    #[arg(long, value_enum, default_value = "all")]
    split: Split,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Window length; defaults to the model's maximum.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    suite: Suite,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Accepted for symmetry; the suites are always deterministic.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Also write `verify.json` into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: tensorized::Error| e.to_string())
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// JSON run configuration supplying the model section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Factor width; defaults to `d_model / heads`.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Core rank; defaults to `d`.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = 10000)]
    vocab: usize,
    /// Sequence length for the FLOP estimate.
    #[arg(long = "seq-len", short = 'n', default_value_t = 64)]
    seq_len: usize,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

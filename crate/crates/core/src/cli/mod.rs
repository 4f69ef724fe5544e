//! Command-line experiment runner.
//!
//! Every command writes `manifest.json` next to its outputs; `replay` reruns
//! a command from such a manifest. Exit codes: 0 success, 1 internal error,
//! 2 usage or configuration, 3 validation, 4 I/O, 5 sweep cell failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{load_checkpoint, load_dataset, Checkpoint, Manifest, ModelFile, SWEEP_CSV, SWEEP_LOSSES};
pub use config::{parse_loss, DatasetSpec, ExperimentConfig, ModelDims, DESK_LR};

use crate::error::Error;
use crate::metrics::RationaleSource;
use crate::objectives::{Combinator, Mode};

#[derive(Debug, Parser)]
#[command(
    name = "vqa-rationale",
    version,
    about = "Answer and rationale models on synthetic or VCR-style data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, or convert VCR-style files.
    GenData(GenDataArgs),
    /// Train the answer model alone.
    Pretrain(TrainArgs),
    /// Train the rationale model, frozen (fr) or jointly (ra).
    Train(TrainArgs),
    /// Train a fresh model per loss combination and tabulate the results.
    /// `--pretrained` supplies the kldiv reference.
    Sweep(TrainArgs),
    /// Score trained models and compare them side by side.
    Eval(EvalArgs),
    /// Aggregate a pairwise human-judgment sheet.
    Judge(JudgeArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub val: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// VCR-style training file; replaces generation.
    #[arg(long, requires = "vcr_val")]
    pub vcr_train: Option<PathBuf>,
    #[arg(long, requires = "vcr_train")]
    pub vcr_val: Option<PathBuf>,
    /// Directory of `<annot_id>.json` region features; hashed if absent.
    #[arg(long, requires = "vcr_train")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory written by `pretrain`.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// `lambda=<x>`, `var` or `kldiv[=<beta>]`.
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<Combinator>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub detach_answer_loss: bool,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_lm: Option<usize>,
    #[arg(long)]
    pub layers_lm: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `NAME=DIR`; repeat to compare models.
    #[arg(long = "model", required = true, value_parser = parse_model)]
    pub models: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "generated", value_parser = parse_source)]
    pub rationale_source: RationaleSource,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// CSV with header `item_id,judge_id,preference`.
    #[arg(long)]
    pub sheet: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "fr" => Ok(Mode::Fr),
        "ra" => Ok(Mode::Ra),
        _ => Err(format!("unknown mode {s:?}; expected fr or ra")),
    }
}

fn parse_source(s: &str) -> Result<RationaleSource, String> {
    match s {
        "generated" => Ok(RationaleSource::Generated),
        "gold" => Ok(RationaleSource::Gold),
        _ => Err(format!("unknown rationale source {s:?}; expected generated or gold")),
    }
}

fn parse_model(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() && !name.contains(',') => {
            Ok((name.to_string(), PathBuf::from(dir)))
        }
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Validation(_) | Error::Parse { .. } | Error::UnknownToken(_) | Error::TemplateInapplicable { .. } => 3,
        Error::Io { .. } | Error::Json { .. } => 4,
        _ => 1,
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &recorded) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

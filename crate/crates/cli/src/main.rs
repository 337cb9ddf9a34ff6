//! `feasflow`: train normalizing flows on feasible embeddings and flag
//! low-likelihood inputs.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feasflow_core::{Error, ErrorCategory};

#[derive(Debug, Parser)]
#[command(name = "feasflow", version, about = "Feasibility scoring with Real-NVP density estimation")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic benchmark and its splits.
    Synth(SynthArgs),
    /// Train a flow on feasible embeddings.
    Train(TrainArgs),
    /// Score embeddings with a flow or OC-SVM checkpoint.
    Score(ScoreArgs),
    /// Pick the decision threshold from labeled scores.
    Threshold(ThresholdArgs),
    /// AUROC, ROC curve and confusion counts of labeled scores.
    Eval(EvalArgs),
    /// Fit and evaluate the one-class SVM baseline.
    Baseline(BaselineArgs),
    /// Export latents and cosine-similarity matrices.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with synthetic-benchmark settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n_id: Option<usize>,
    #[arg(long)]
    pub n_ood: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub ball_radius: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// OOD mean shift in units of sigma_max.
    #[arg(long)]
    pub shift_sigmas: Option<f64>,
    #[arg(long)]
    pub inflation: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training embeddings (feasible or unlabeled rows).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation embeddings used for model selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// `gaussian` or `resampling`.
    #[arg(long)]
    pub base: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub conditioner_depth: Option<usize>,
    #[arg(long)]
    pub conditioner_width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ThresholdSource {
    /// Decision threshold on the log-likelihood.
    #[arg(long, conflicts_with = "threshold_file")]
    pub threshold: Option<f64>,
    /// JSON written by `feasflow threshold`.
    #[arg(long)]
    pub threshold_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub threshold: ThresholdSource,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub threshold: ThresholdSource,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// TOML file with OC-SVM settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

/// Missing inputs are usage errors; other I/O failures are data errors.
fn category(e: &Error) -> ErrorCategory {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorCategory::Usage,
        other => other.category(),
    }
}

fn fail(category: ErrorCategory, message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error[{}]: {line}", category.as_str());
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(ErrorCategory::Usage, first.trim_start_matches("error: "));
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(ErrorCategory::Usage, "--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(ErrorCategory::Usage, &format!("thread pool: {e}"));
        }
    }

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(category(&e), &e.to_string()),
    }
}

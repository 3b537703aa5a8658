//! `disambig`: thin, deterministic wrappers over the pipeline stages.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, inputs or
//! fingerprints), 2 runtime failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(m: impl Into<String>) -> Self {
        CliError::Validation(m.into())
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        CliError::Runtime(m.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "disambig", version, about = "Medical report disambiguation rewriting pipeline")]
pub struct Cli {
    /// JSON object overriding the command's configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then DISAMBIG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic corpus with its train/val/test split and vocabulary.
    GenSynthetic(GenSyntheticArgs),
    /// Pretrain the encoder-decoder with infilling and contrastive losses.
    Pretrain(PretrainArgs),
    /// Cluster generator embeddings into pathology pseudo-labels.
    Pseudolabel(PseudolabelArgs),
    /// Train a detect, decision or evaluation model.
    TrainClf(TrainClfArgs),
    /// Rewrite sentences toward their gold decision.
    Rewrite(RewriteArgs),
    /// Dictionary-based replacement baseline.
    Kbr(KbrArgs),
    /// Score a rewrite system.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Corpus with pathology labels (true or pseudo).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PseudolabelArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClfKind {
    Ambiguity,
    Decision,
    Eval,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Ambiguity,
    Abnormality,
    Mlm,
}

#[derive(Args, Debug)]
pub struct TrainClfArgs {
    #[arg(long, value_enum)]
    pub kind: ClfKind,
    /// Required with `--kind eval`.
    #[arg(long, value_enum)]
    pub target: Option<EvalTarget>,
    #[arg(long)]
    pub train: PathBuf,
    /// Not used by the masked LM.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Select {
    /// Relevant sentences labeled ambiguous.
    Ambiguous,
    /// All relevant sentences.
    Relevant,
}

#[derive(Args, Debug)]
pub struct RewriteArgs {
    #[arg(long, default_value = "full")]
    pub mode: disambig_core::rewrite::RewriteMode,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub decision: PathBuf,
    /// Labeled corpus; each sentence is pushed toward its gold decision.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "ambiguous")]
    pub select: Select,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct KbrArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tab-separated `source<TAB>replacement` lines; the shipped dictionary when absent.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ambiguous")]
    pub select: Select,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelerKind {
    Rule,
    Cluster,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Gold-labeled corpus the rewrites were made from.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `rewrites.jsonl` or the directory holding it.
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub rewrites: Option<PathBuf>,
    /// Score the selected originals against themselves.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, value_enum, default_value = "ambiguous")]
    pub select: Select,
    #[arg(long)]
    pub ambiguity_clf: PathBuf,
    #[arg(long)]
    pub abnormality_clf: PathBuf,
    #[arg(long)]
    pub mlm: PathBuf,
    #[arg(long, value_enum, default_value = "rule")]
    pub labeler: LabelerKind,
    /// Required with `--labeler cluster`.
    #[arg(long)]
    pub cluster_model: Option<PathBuf>,
    /// Generator the cluster model was fit with.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Holds the event log and the run manifest.
    #[arg(long)]
    pub state_dir: PathBuf,
    /// Generator checkpoints; one with and one without the contrastive term serve all modes.
    #[arg(long)]
    pub generator: Vec<PathBuf>,
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long, requires = "generator")]
    pub decision: Option<PathBuf>,
    /// Per-request rewrite budget in seconds.
    #[arg(long, default_value_t = 30)]
    pub budget_secs: u64,
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
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

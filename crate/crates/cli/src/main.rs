//! `xlkd`: synthetic data, answer vocabularies, code-mixing, distillation,
//! fine-tuning and evaluation from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "xlkd",
    version,
    about = "Cross-lingual knowledge distillation for visual question answering"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root (default: $XLKD_OUT, else ./xlkd-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Region feature blob for records that reference features by id.
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    /// Reject datasets with malformed lines instead of skipping them.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bilingual corpus and its vocabularies.
    Synth(SynthArgs),
    /// Build (and optionally merge) the answer-class vocabulary.
    Vocab(VocabArgs),
    /// Write code-mixed target questions for a parallel corpus.
    Codemix(CodemixArgs),
    /// Distill a teacher into a target-language student.
    Distill(DistillArgs),
    /// Fine-tune on task data: classifier first, then the whole model.
    Finetune(TaskArgs),
    /// Train on machine-translated task data.
    Aug(TaskArgs),
    /// Score a model on task data.
    Eval(EvalArgs),
    /// Dump hidden states of selected tokens and regions as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub task_examples: Option<usize>,
    #[arg(long)]
    pub eligibility: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Task JSONL whose answers are counted.
    #[arg(long)]
    pub data: PathBuf,
    /// Number of classes (overrides the config).
    #[arg(long)]
    pub k: Option<usize>,
    /// JSON object mapping answers to translations; classes that share a
    /// translation are merged.
    #[arg(long)]
    pub translations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodemixArgs {
    #[arg(long)]
    pub parallel: PathBuf,
    #[arg(long)]
    pub teacher_vocab: PathBuf,
    #[arg(long)]
    pub student_vocab: PathBuf,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub parallel: PathBuf,
    #[arg(long)]
    pub teacher_vocab: PathBuf,
    #[arg(long)]
    pub student_vocab: PathBuf,
    /// Teacher checkpoint; a seeded random teacher is built without one.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Student checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Parallel JSONL for checkpoint selection.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Answer classes, to size the student's classifier.
    #[arg(long)]
    pub answers: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub no_cls: bool,
    #[arg(long)]
    pub no_img: bool,
    #[arg(long)]
    pub no_tag: bool,
    #[arg(long)]
    pub no_cm: bool,
    /// Distill the last layer only.
    #[arg(long)]
    pub last_layer_only: bool,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Subword vocabulary of the model.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Answer classes TSV.
    #[arg(long)]
    pub answers: PathBuf,
    /// Starting checkpoint; a fresh model is trained without one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub answers: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated subwords and region labels to export.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Vec<String>,
    /// Layer to read (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", e.render());
            eprintln!("{}", error_json("usage", &e.kind().to_string()));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}

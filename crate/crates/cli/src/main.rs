//! `ncrf`: prepares data, trains, fine-tunes, samples from and evaluates
//! models, and renders reports. Every subcommand reads the same JSON run
//! configuration, lets flags override it, and writes only below `--out`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncrf_core::eval::ReportFormat;

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "ncrf", version, about = "Coherence-reward language model training pipeline")]
struct Cli {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize, split, stratify and tokenize a corpus.
    Prepare(PrepareArgs),
    /// Train a fresh model on the prepared training split.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with the coherence reward.
    Finetune(FinetuneArgs),
    /// Sample continuations from a checkpoint.
    Generate(GenerateArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Render evaluation results, the loss curve and error histogram.
    Report(ReportArgs),
    /// Pretrain one model per cell of the configured hyperparameter grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// JSONL corpus, one `{"text": ...}` object per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    target_vocab: Option<usize>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct PretrainArgs {
    /// Prepared dataset directory [default: OUT/data].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct FinetuneArgs {
    /// Starting checkpoint [default: OUT/pretrain/checkpoint].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct GenerateArgs {
    /// Checkpoint to sample from [default: the fine-tuned one if present,
    /// else the pretrained one].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    /// 0 decodes greedily.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
struct EvaluateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to score [default: the fine-tuned one if present, else
    /// the pretrained one].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reference checkpoint for the perplexity reduction [default: a
    /// uniform model over the vocabulary].
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Evaluation results to tabulate; repeatable [default:
    /// OUT/evaluate/results.json].
    #[arg(long)]
    results: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::Prepare(a) => {
            set(&mut cfg.data.corpus, a.corpus.clone());
            set(&mut cfg.data.target_vocab, a.target_vocab);
        }
        Command::Pretrain(a) => {
            set(&mut cfg.pretrain.epochs, a.epochs);
            set(&mut cfg.pretrain.lambda, a.lambda);
            set(&mut cfg.pretrain.learning_rate, a.learning_rate);
        }
        Command::Finetune(a) => {
            set(&mut cfg.finetune.rl_iterations, a.iterations);
            set(&mut cfg.finetune.beta, a.beta);
            set(&mut cfg.finetune.temperature, a.temperature);
            set(&mut cfg.finetune.learning_rate, a.learning_rate);
        }
        Command::Generate(a) => {
            set(&mut cfg.generate.prompt, a.prompt.clone());
            set(&mut cfg.generate.samples, a.samples);
            set(&mut cfg.generate.temperature, a.temperature);
            set(&mut cfg.generate.max_tokens, a.max_tokens);
        }
        Command::Evaluate(a) => set(&mut cfg.eval.temperature, a.temperature),
        Command::Report(_) => {}
        Command::Sweep(a) => set(&mut cfg.pretrain.epochs, a.epochs),
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Prepare(_) => commands::prepare(&cfg),
        Command::Pretrain(a) => commands::pretrain(&cfg, a.data),
        Command::Finetune(a) => commands::finetune(&cfg, a.checkpoint),
        Command::Generate(a) => commands::generate(&cfg, a.checkpoint),
        Command::Evaluate(a) => commands::evaluate(&cfg, a.data, a.checkpoint, a.baseline),
        Command::Report(a) => commands::report(&cfg, a.format, a.results),
        Command::Sweep(a) => commands::sweep(&cfg, a.data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NCRF_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

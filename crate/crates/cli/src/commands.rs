//! Subcommand implementations. Each stage reads its inputs, writes its
//! artifacts under `<out>/<stage>/` and echoes the effective configuration
//! there as `config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ncrf_core::eval::{
    emit_report, error_histogram, evaluate_model, perplexity, write_error_histogram, write_loss_curve, EvalPrompt,
    EvalResult, ReportFormat,
};
use ncrf_core::model::{generate as sample, GenerateOptions, ModelParams};
use ncrf_core::objectives::{coherence_metric, trajectory_reward};
use ncrf_core::tokenizer::dataset::Stratum;
use ncrf_core::tokenizer::{chunk_sequence, load_corpus, normalize, prepare as prepare_dataset, BpeModel, PreparedDataset, PrepareOptions, BOS, EOS, SEP};
use ncrf_core::training::{
    evaluate_loss, expand_grid, finetune_rl, load_checkpoint, pretrain as run_pretrain, save_checkpoint, Checkpoint,
    TrainLog,
};
use ncrf_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;

/// Stream of the parameter-initialization rng, apart from the training
/// streams that share the seed.
const INIT_STREAM: u64 = 2;

fn stage_dir(cfg: &RunConfig, stage: &str) -> CliResult<PathBuf> {
    let dir = cfg.out.join(stage);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Training log with timing stripped so reruns produce identical files.
fn write_log(log: &TrainLog, path: &Path) -> CliResult<()> {
    let mut stable = TrainLog::new();
    for r in log.without_timing() {
        stable.push(r)?;
    }
    stable.write_jsonl(path)?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig, data: Option<PathBuf>) -> CliResult<PreparedDataset> {
    let dir = data.unwrap_or_else(|| cfg.out.join("data"));
    if !dir.join("manifest.json").exists() {
        return Err(Error::Data(format!("no prepared dataset in {}; run `ncrf prepare` first", dir.display())).into());
    }
    Ok(PreparedDataset::load(&dir)?)
}

fn split_sequences(ds: &PreparedDataset, split: &str, max_len: usize) -> Vec<Vec<usize>> {
    ds.split(split)
        .map(|s| s.documents.iter().flat_map(|d| chunk_sequence(d, max_len)).collect())
        .unwrap_or_default()
}

fn init_params(cfg: &RunConfig, vocab_size: usize) -> CliResult<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    Ok(ModelParams::init(cfg.model.with_vocab(vocab_size), &mut rng)?)
}

/// The fine-tuned checkpoint when one exists, otherwise the pretrained one.
fn latest_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let tuned = cfg.out.join("finetune").join("checkpoint");
        if tuned.join("manifest.json").exists() {
            tuned
        } else {
            cfg.out.join("pretrain").join("checkpoint")
        }
    })
}

fn tokenizer_of(ck: &Checkpoint) -> CliResult<&BpeModel> {
    Ok(ck
        .manifest
        .tokenizer
        .as_ref()
        .ok_or_else(|| Error::Format("checkpoint carries no tokenizer".into()))?)
}

fn stratum_name(s: Stratum) -> &'static str {
    match s {
        Stratum::Low => "low",
        Stratum::Medium => "medium",
        Stratum::High => "high",
    }
}

/// `BOS`, the first sentence and its `SEP`, truncated to fit the context.
fn first_sentence_prompt(doc: &[usize], max_len: usize) -> Vec<usize> {
    let end = doc.iter().position(|&t| t == SEP).map_or(doc.len(), |i| i + 1);
    let mut p: Vec<usize> = doc[..end].iter().copied().filter(|&t| t != EOS).collect();
    p.truncate(max_len - 1);
    if p.is_empty() {
        p.push(BOS);
    }
    p
}

pub fn prepare(cfg: &RunConfig) -> CliResult<()> {
    let docs = load_corpus(&cfg.data.corpus)?;
    let ds = prepare_dataset(
        &docs,
        &PrepareOptions {
            target_vocab: cfg.data.target_vocab,
            validation_fraction: cfg.data.validation_fraction,
            test_fraction: cfg.data.test_fraction,
            seed: cfg.seed,
        },
    )?;
    for w in &ds.manifest.warnings {
        log::warn!("{w}");
    }
    let dir = stage_dir(cfg, "data")?;
    ds.write(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    for s in &ds.manifest.splits {
        log::info!("{}: {} documents, {} tokens", s.name, s.samples, s.tokens);
    }
    Ok(())
}

#[derive(Serialize)]
struct PretrainReport {
    epochs_run: usize,
    steps: u64,
    stopped_early: bool,
    initial_train_loss: f64,
    final_train_loss: f64,
    validation_history: Vec<f64>,
}

pub fn pretrain(cfg: &RunConfig, data: Option<PathBuf>) -> CliResult<()> {
    let ds = load_dataset(cfg, data)?;
    let max_len = cfg.model.max_len;
    let train = split_sequences(&ds, "train", max_len);
    let validation = split_sequences(&ds, "validation", max_len);
    let mut params = init_params(cfg, ds.tokenizer.vocab_size())?;
    let initial = evaluate_loss(&params, &train, cfg.pretrain.lambda)?;
    let mut log = TrainLog::new();
    let summary = run_pretrain(&mut params, &train, &validation, &cfg.pretrain, &mut log)?;
    let fin = evaluate_loss(&params, &train, cfg.pretrain.lambda)?;
    log::info!("training loss {initial:.4} -> {fin:.4} over {} epochs", summary.epochs_run);

    let dir = stage_dir(cfg, "pretrain")?;
    let ck = Checkpoint::new(params, Some(ds.tokenizer.clone()), Some(cfg.pretrain.clone()))
        .with_progress(summary.epochs_run, summary.validation_history.clone());
    save_checkpoint(&dir.join("checkpoint"), &ck)?;
    write_log(&log, &dir.join("train_log.jsonl"))?;
    write_loss_curve(&log, &dir.join("loss_curve.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &PretrainReport {
            epochs_run: summary.epochs_run,
            steps: summary.steps,
            stopped_early: summary.stopped_early,
            initial_train_loss: initial,
            final_train_loss: fin,
            validation_history: summary.validation_history,
        },
    )?;
    write_json(&dir.join("config.json"), cfg)
}

#[derive(Serialize)]
struct FinetuneReport {
    iterations_run: usize,
    skipped: usize,
    mean_rewards: Vec<f64>,
    final_baseline: f64,
}

pub fn finetune(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let src = checkpoint.unwrap_or_else(|| cfg.out.join("pretrain").join("checkpoint"));
    let ck = load_checkpoint(&src)?;
    let mut params = ck.params.clone();
    let mut log = TrainLog::new();
    let summary = finetune_rl(&mut params, &[vec![BOS]], &cfg.finetune, None, &mut log)?;
    if let (Some(first), Some(last)) = (summary.mean_rewards.first(), summary.mean_rewards.last()) {
        log::info!("mean reward {first:.4} -> {last:.4}");
    }

    let dir = stage_dir(cfg, "finetune")?;
    let out = Checkpoint::new(params, ck.manifest.tokenizer.clone(), Some(cfg.finetune.clone()))
        .with_progress(summary.iterations_run, summary.mean_rewards.clone());
    save_checkpoint(&dir.join("checkpoint"), &out)?;
    write_log(&log, &dir.join("train_log.jsonl"))?;
    write_json(
        &dir.join("summary.json"),
        &FinetuneReport {
            iterations_run: summary.iterations_run,
            skipped: summary.skipped,
            mean_rewards: summary.mean_rewards,
            final_baseline: summary.baseline.value,
        },
    )?;
    write_json(&dir.join("config.json"), cfg)
}

#[derive(Serialize)]
struct SampleRecord {
    text: String,
    prompt: Vec<usize>,
    generated: Vec<usize>,
    log_probs: Vec<f64>,
    terminal: bool,
    degenerate: bool,
    reward: f64,
    coherence: Option<f64>,
}

pub fn generate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let ck = load_checkpoint(&latest_checkpoint(cfg, checkpoint))?;
    let tok = tokenizer_of(&ck)?;
    let text = normalize(&cfg.generate.prompt);
    let mut prompt = tok.encode_document(&text);
    prompt.pop();
    // An unfinished sentence is continued rather than closed.
    if !text.is_empty() && !text.ends_with(['.', '!', '?']) {
        prompt.pop();
    }
    let opts = GenerateOptions {
        temperature: cfg.generate.temperature,
        max_tokens: cfg.generate.max_tokens,
        template: cfg.finetune.template.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.generate.samples);
    for _ in 0..cfg.generate.samples {
        let t = sample(&ck.params, &prompt, &opts, &mut rng)?;
        let reward = trajectory_reward(&t, cfg.finetune.mu, cfg.eval.tau_c)?;
        let coherence = if t.degenerate {
            None
        } else {
            Some(coherence_metric(t.coherence_units(), None, cfg.eval.tau_c)?.coherence)
        };
        let ids: Vec<usize> = t.prompt.iter().chain(&t.generated).copied().collect();
        records.push(SampleRecord {
            text: tok.decode(&ids)?,
            prompt: t.prompt.clone(),
            generated: t.generated.clone(),
            log_probs: t.log_probs.clone(),
            terminal: t.terminal,
            degenerate: t.degenerate,
            reward,
            coherence,
        });
    }

    let dir = stage_dir(cfg, "generate")?;
    let text: String = records.iter().map(|r| format!("{}\n", r.text)).collect();
    let path = dir.join("samples.txt");
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    write_json(&dir.join("trajectories.json"), &records)?;
    write_json(&dir.join("config.json"), cfg)
}

pub fn evaluate(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> CliResult<()> {
    let ds = load_dataset(cfg, data)?;
    let ck = load_checkpoint(&latest_checkpoint(cfg, checkpoint))?;
    let max_len = ck.params.config().max_len;
    let test = ds
        .split("test")
        .filter(|s| !s.documents.is_empty())
        .ok_or_else(|| Error::Data("the test split is empty".into()))?;
    let sequences = split_sequences(&ds, "test", max_len);
    let prompts: Vec<EvalPrompt> = test
        .documents
        .iter()
        .zip(&test.strata)
        .map(|(doc, &s)| EvalPrompt {
            tokens: first_sentence_prompt(doc, max_len),
            category: stratum_name(s).to_owned(),
        })
        .collect();
    let baseline_ppl = match baseline {
        Some(path) => perplexity(&load_checkpoint(&path)?.params, &sequences)?,
        None => ck.params.config().vocab_size as f64,
    };
    let result = evaluate_model(&ck.params, &cfg.dataset_name, &sequences, &prompts, baseline_ppl, &cfg.eval)?;
    log::info!(
        "coherence {:.1}, perplexity {:.3} ({:.1}% below baseline), alignment {:.1}%",
        result.coherence_score,
        result.perplexity,
        result.perplexity_reduction_pct,
        result.semantic_alignment_pct
    );

    let dir = stage_dir(cfg, "evaluate")?;
    write_json(&dir.join("results.json"), std::slice::from_ref(&result))?;
    write_error_histogram(&histogram(std::slice::from_ref(&result))?, &dir.join("error_histogram.csv"))?;
    write_json(&dir.join("config.json"), cfg)
}

fn histogram(results: &[EvalResult]) -> CliResult<ncrf_core::eval::ErrorHistogram> {
    let samples: Vec<(&str, f64)> = results
        .iter()
        .flat_map(|r| r.categories.iter().map(String::as_str).zip(r.error_rates.iter().copied()))
        .collect();
    Ok(error_histogram(&samples, 10)?)
}

pub fn report(cfg: &RunConfig, format: ReportFormat, results: Vec<PathBuf>) -> CliResult<()> {
    let sources = if results.is_empty() {
        vec![cfg.out.join("evaluate").join("results.json")]
    } else {
        results
    };
    let mut rows: Vec<EvalResult> = Vec::new();
    for path in &sources {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        rows.extend(serde_json::from_str::<Vec<EvalResult>>(&text).map_err(Error::from)?);
    }
    let dir = stage_dir(cfg, "report")?;
    let name = match format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Json => "report.json",
    };
    emit_report(&rows, format, &dir.join(name))?;
    write_error_histogram(&histogram(&rows)?, &dir.join("error_histogram.csv"))?;
    let log_path = cfg.out.join("pretrain").join("train_log.jsonl");
    if log_path.exists() {
        write_loss_curve(&TrainLog::read_jsonl(&log_path)?, &dir.join("loss_curve.csv"))?;
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig, data: Option<PathBuf>) -> CliResult<()> {
    let ds = load_dataset(cfg, data)?;
    let max_len = cfg.model.max_len;
    let train = split_sequences(&ds, "train", max_len);
    let validation = split_sequences(&ds, "validation", max_len);
    let cells = expand_grid(&cfg.pretrain, &cfg.sweep)?;
    let dir = stage_dir(cfg, "sweep")?;
    write_json(&dir.join("config.json"), cfg)?;

    let matrix_path = dir.join("matrix.csv");
    let mut matrix = csv::Writer::from_path(&matrix_path).map_err(|e| Error::Format(e.to_string()))?;
    matrix
        .write_record([
            "cell",
            "name",
            "learning_rate",
            "lambda",
            "beta",
            "layer_decay",
            "dropout",
            "epochs_run",
            "train_loss",
            "validation_loss",
            "validation_perplexity",
        ])
        .map_err(Error::from)?;
    for (i, cell) in cells.iter().enumerate() {
        log::info!("sweep cell {i}: {}", cell.name);
        let mut params = init_params(cfg, ds.tokenizer.vocab_size())?;
        let mut log = TrainLog::new();
        let summary = run_pretrain(&mut params, &train, &validation, &cell.config, &mut log)?;
        let train_loss = evaluate_loss(&params, &train, cell.config.lambda)?;
        let (val_loss, val_ppl) = if validation.is_empty() {
            (String::new(), String::new())
        } else {
            (
                evaluate_loss(&params, &validation, cell.config.lambda)?.to_string(),
                perplexity(&params, &validation)?.to_string(),
            )
        };
        let cell_dir = dir.join(format!("cell-{i:03}"));
        let ck = Checkpoint::new(params, Some(ds.tokenizer.clone()), Some(cell.config.clone()))
            .with_progress(summary.epochs_run, summary.validation_history);
        save_checkpoint(&cell_dir.join("checkpoint"), &ck)?;
        write_log(&log, &cell_dir.join("train_log.jsonl"))?;
        write_json(&cell_dir.join("config.json"), &cell.config)?;
        let c = &cell.config;
        matrix
            .write_record([
                format!("cell-{i:03}"),
                cell.name.clone(),
                c.learning_rate.to_string(),
                c.lambda.to_string(),
                c.beta.to_string(),
                c.layer_decay.to_string(),
                c.dropout.to_string(),
                summary.epochs_run.to_string(),
                train_loss.to_string(),
                val_loss,
                val_ppl,
            ])
            .map_err(Error::from)?;
    }
    matrix.flush().map_err(|e| Error::Io {
        path: matrix_path,
        source: e,
    })?;
    Ok(())
}

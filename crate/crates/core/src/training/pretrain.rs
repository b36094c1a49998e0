use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, tensor_learning_rates, AdamState};
use super::{Stage, TrainConfig, TrainLog, TrainRecord};
use crate::error::{Error, Result};
use crate::model::{sentence_spans, Dropout, ModelParams, ParamVars};
use crate::objectives::{clip_gradients, structural_alignment_on_tape};
use crate::tensor::{Tape, Var};
use crate::tokenizer::bpe::is_special;

/// Minimum decrease that counts as an improvement for early stopping.
pub const EARLY_STOP_MIN_DELTA: f64 = 1e-6;

/// Stream offset separating the dropout mask stream from the shuffle stream.
const DROPOUT_STREAM: u64 = 1;

/// True when the best loss in `history` has not improved by more than
/// [`EARLY_STOP_MIN_DELTA`] for `patience` consecutive evaluations.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some((&first, rest)) = history.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &x in rest {
        if x < best - EARLY_STOP_MIN_DELTA {
            best = x;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

/// Sentence spans for the alignment term. A trailing piece made only of
/// special tokens (the closing EOS) joins the preceding sentence.
fn alignment_spans(tokens: &[usize]) -> Vec<Range<usize>> {
    let mut spans = sentence_spans(tokens);
    if spans.len() >= 2 {
        let last = spans.last().expect("non-empty").clone();
        if tokens[last.clone()].iter().all(|&t| is_special(t)) {
            spans.pop();
            spans.last_mut().expect("non-empty").end = last.end;
        }
    }
    spans
}

/// Records `L_CE + λ·L_SA` for one sequence on `tape`. Returns the loss
/// variable and the values of `L_CE` and `L_SA`.
///
/// `L_CE` is the mean next-token cross-entropy. `L_SA` runs over sentence
/// embeddings when the sequence holds at least two sentences, otherwise over
/// token hidden states.
pub fn sequence_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: &[usize],
    lambda: f64,
    dropout: Option<&mut Dropout>,
) -> Result<(Var, f64, f64)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument("training sequences need at least two tokens".into()));
    }
    let spans = alignment_spans(tokens);
    let use_sentences = spans.len() >= 2;
    let out = pv.forward(tape, tokens, use_sentences.then_some(spans.as_slice()), dropout)?;
    let rows: Vec<usize> = (0..tokens.len() - 1).collect();
    let logits = tape.select_rows(out.logits, &rows)?;
    let lp = tape.log_softmax_pick(logits, &tokens[1..])?;
    let mean_lp = tape.mean(lp)?;
    let ce = tape.scale(mean_lp, -1.0)?;
    let units = out.sentences.unwrap_or(out.hidden);
    let sa = structural_alignment_on_tape(tape, units, None)?;
    let (ce_v, sa_v) = (tape.scalar(ce), tape.scalar(sa));
    let total = if lambda > 0.0 {
        let weighted = tape.scale(sa, lambda)?;
        tape.add(ce, weighted)?
    } else {
        ce
    };
    Ok((total, ce_v, sa_v))
}

/// Adds `scale · ∇(L_CE + λ·L_SA)` for each sequence of `batch` into the
/// gradient slots of `params`. Returns the summed `L_CE` and `L_SA`.
///
/// With `scale = 1/B` for an optimizer batch of `B` sequences, calling this
/// once per micro-batch yields the full-batch mean gradient.
pub fn accumulate_batch_gradient(
    params: &mut ModelParams,
    batch: &[&[usize]],
    scale: f64,
    lambda: f64,
    mut dropout: Option<&mut Dropout>,
) -> Result<(f64, f64)> {
    let (mut ce_sum, mut sa_sum) = (0.0, 0.0);
    for tokens in batch {
        let mut tape = Tape::new();
        let pv = ParamVars::register(params, &mut tape, true);
        let (loss, ce, sa) = sequence_loss(&mut tape, &pv, tokens, lambda, dropout.as_deref_mut())?;
        tape.backward(loss)?;
        pv.accumulate_grads(&tape, params, scale)?;
        ce_sum += ce;
        sa_sum += sa;
    }
    Ok((ce_sum, sa_sum))
}

/// Mean `L_CE + λ·L_SA` over `sequences` without gradients.
pub fn evaluate_loss(params: &ModelParams, sequences: &[Vec<usize>], lambda: f64) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut total = 0.0;
    for tokens in sequences {
        let mut tape = Tape::new();
        let pv = ParamVars::register(params, &mut tape, false);
        let (loss, _, _) = sequence_loss(&mut tape, &pv, tokens, lambda, None)?;
        total += tape.scalar(loss);
    }
    Ok(total / sequences.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub validation_history: Vec<f64>,
}

/// Minimizes `L_CE + λ·L_SA` over `train`, shuffled per epoch with the
/// config seed. Each optimizer step sums `accumulation_steps` micro-batches
/// of `batch_size` sequences, clips the global gradient norm and applies
/// Adam with layer-wise learning rates. When `validation` is non-empty it is
/// evaluated every `eval_interval` epochs and drives early stopping.
pub fn pretrain(
    params: &mut ModelParams,
    train: &[Vec<usize>],
    validation: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PretrainSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("pretraining needs at least one training sequence".into()));
    }
    let start = Instant::now();
    let lrs = tensor_learning_rates(params.config(), cfg.learning_rate, cfg.layer_decay)?;
    let mut adam = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = (cfg.dropout > 0.0).then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(DROPOUT_STREAM);
        Dropout {
            rate: cfg.dropout,
            rng: r,
        }
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summary = PretrainSummary {
        epochs_run: 0,
        steps: 0,
        stopped_early: false,
        validation_history: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.effective_batch()) {
            params.zero_grad();
            let scale = 1.0 / chunk.len() as f64;
            let (mut ce, mut sa) = (0.0, 0.0);
            for micro in chunk.chunks(cfg.batch_size) {
                let batch: Vec<&[usize]> = micro.iter().map(|&i| train[i].as_slice()).collect();
                let (c, s) = accumulate_batch_gradient(params, &batch, scale, cfg.lambda, dropout.as_mut())?;
                ce += c;
                sa += s;
            }
            let grad_norm = clip_gradients(&mut params.named_grads_mut(), cfg.clip)?;
            adam_step(params, &mut adam, &lrs)?;
            let (ce, sa) = (ce * scale, sa * scale);
            log.push(TrainRecord {
                stage: Stage::Pretrain,
                epoch,
                step: log.next_step(),
                ce,
                sa,
                total: ce + cfg.lambda * sa,
                reg: 0.0,
                mean_reward: None,
                baseline: None,
                grad_norm,
                val_loss: None,
                wall_time: start.elapsed().as_secs_f64(),
            })?;
            summary.steps += 1;
        }
        summary.epochs_run = epoch + 1;
        ::log::debug!("pretrain epoch {epoch} done after {} steps", summary.steps);

        if !validation.is_empty() && cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0 {
            let v = evaluate_loss(params, validation, cfg.lambda)?;
            log.annotate_validation(v);
            summary.validation_history.push(v);
            ::log::info!("epoch {epoch}: validation loss {v:.4}");
            if early_stop_check(&summary.validation_history, cfg.patience) {
                ::log::info!("early stop after epoch {epoch}");
                summary.stopped_early = true;
                break;
            }
        }
    }
    Ok(summary)
}

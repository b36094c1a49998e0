use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::{hierarchical_encode, sentence_spans, ParamVars};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::objectives::{constraint_mask, Trajectory};
use crate::tensor::{kernels, Tape, Tensor};
use crate::tokenizer::{EOS, SEP};

/// Additive logit for tokens banned at a step.
pub const MASKED_LOGIT: f64 = -1e9;

/// Structural limits applied while decoding. Sentences are counted by the
/// `SEP` tokens emitted so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeTemplate {
    /// EOS is banned until this many sentences have been emitted.
    pub min_sentences: usize,
    /// EOS is forced once this many sentences have been emitted.
    pub max_sentences: Option<usize>,
    /// Bans emitting the same token twice in a row.
    pub forbid_immediate_repeat: bool,
}

/// What the template allowed at one decoding step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepConstraint {
    Free,
    Banned(Vec<usize>),
    /// EOS was emitted without sampling.
    ForcedEos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    /// Logit divisor; 0 decodes greedily.
    pub temperature: f64,
    pub max_tokens: usize,
    pub template: Option<DecodeTemplate>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            temperature: 1.0,
            max_tokens: 64,
            template: None,
        }
    }
}

fn step_constraint(template: Option<&DecodeTemplate>, generated: &[usize], last: usize) -> StepConstraint {
    let Some(t) = template else {
        return StepConstraint::Free;
    };
    let sentences = generated.iter().filter(|&&id| id == SEP).count();
    if t.max_sentences.is_some_and(|m| sentences >= m) {
        return StepConstraint::ForcedEos;
    }
    let mut banned = Vec::new();
    if sentences < t.min_sentences {
        banned.push(EOS);
    }
    if t.forbid_immediate_repeat && !banned.contains(&last) {
        banned.push(last);
    }
    if banned.is_empty() {
        StepConstraint::Free
    } else {
        banned.sort_unstable();
        StepConstraint::Banned(banned)
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Samples a continuation of `prompt` token by token.
///
/// Stops at EOS, after `max_tokens`, or when the context window is full.
/// The returned trajectory records the log-probability of every sampled
/// token under the masked, tempered distribution it was drawn from (the
/// temperature-1 distribution when decoding greedily; 0 for forced EOS),
/// plus hidden states and sentence embeddings of the generated content.
pub fn generate<R: Rng>(params: &ModelParams, prompt: &[usize], opts: &GenerateOptions, rng: &mut R) -> Result<Trajectory> {
    let cfg = *params.config();
    if !(opts.temperature >= 0.0 && opts.temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and ≥ 0, got {}",
            opts.temperature
        )));
    }
    if opts.max_tokens == 0 {
        return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt must contain at least one token".into()));
    }
    if prompt.len() >= cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "prompt length {} leaves no room in a context of {}",
            prompt.len(),
            cfg.max_len
        )));
    }
    if let Some(t) = &opts.template {
        if t.max_sentences.is_some_and(|m| m < t.min_sentences) {
            return Err(Error::InvalidArgument("template max_sentences is below min_sentences".into()));
        }
    }

    let budget = opts.max_tokens.min(cfg.max_len - prompt.len());
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::new();
    let mut log_probs = Vec::new();
    let mut constraints = Vec::new();
    let mut terminal = false;
    while generated.len() < budget {
        let constraint = step_constraint(opts.template.as_ref(), &generated, *tokens.last().expect("non-empty"));
        if constraint == StepConstraint::ForcedEos {
            generated.push(EOS);
            log_probs.push(0.0);
            constraints.push(constraint);
            terminal = true;
            break;
        }
        let logits = next_token_logits(params, &tokens)?;
        let mask = constraint_mask(&constraint, cfg.vocab_size);
        let scale = if opts.temperature > 0.0 { 1.0 / opts.temperature } else { 1.0 };
        let scores: Vec<f64> = logits.iter().zip(&mask).map(|(z, m)| z * scale + m).collect();
        let log_p = kernels::log_softmax(&scores);
        let next = if opts.temperature == 0.0 {
            argmax(&scores)
        } else {
            let probs: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
            WeightedIndex::new(&probs)
                .map_err(|e| Error::InvalidArgument(format!("sampling distribution: {e}")))?
                .sample(rng)
        };
        tokens.push(next);
        generated.push(next);
        log_probs.push(log_p[next]);
        constraints.push(constraint);
        if next == EOS {
            terminal = true;
            break;
        }
    }

    let content_len = generated.len() - usize::from(terminal);
    let (hidden, sentences) = if content_len == 0 {
        (Tensor::zeros(&[0, cfg.d_model]), None)
    } else {
        let mut tape = Tape::new();
        let pv = ParamVars::register(params, &mut tape, false);
        let full = &tokens[..prompt.len() + content_len];
        let out = pv.forward(&mut tape, full, None, None)?;
        let rows: Vec<usize> = (prompt.len()..full.len()).collect();
        let h = tape.select_rows(out.hidden, &rows)?;
        let spans = sentence_spans(&generated[..content_len]);
        let s = hierarchical_encode(&mut tape, h, &spans, pv.hier_proj())?;
        (tape.tensor(h), Some(tape.tensor(s)))
    };
    Ok(Trajectory::new(
        prompt.to_vec(),
        generated,
        log_probs,
        constraints,
        opts.temperature,
        hidden,
        sentences,
        terminal,
    ))
}

/// Logits for the token following `tokens`.
fn next_token_logits(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(params, &mut tape, false);
    let out = pv.forward(&mut tape, tokens, None, None)?;
    let v = params.config().vocab_size;
    let all = tape.value(out.logits);
    Ok(all[all.len() - v..].to_vec())
}

//! Evaluation metrics (perplexity, coherence score, semantic alignment,
//! error-rate histograms) and the report files built from them.

mod report;

pub use report::{emit_report, write_error_histogram, write_loss_curve, ReportFormat, CSV_HEADER};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, DecodeTemplate, GenerateOptions, ModelParams, ParamVars};
use crate::objectives::{coherence_metric, DEFAULT_TAU_C};
use crate::tensor::{kernels, Tape};

pub const DEFAULT_ALIGNMENT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_HISTOGRAM_BINS: usize = 10;
const RANGE_TOL: f64 = 1e-9;

/// `exp` of the mean next-token negative log-likelihood over every
/// prediction step of every sequence.
pub fn perplexity(params: &ModelParams, sequences: &[Vec<usize>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Data("perplexity of an empty dataset".into()));
    }
    let (mut nll, mut steps) = (0.0, 0usize);
    for (i, s) in sequences.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Data(format!("sequence {i} has fewer than two tokens")));
        }
        let (lp, _) = crate::model::log_prob_sequence(params, s)?;
        nll -= lp;
        steps += s.len() - 1;
    }
    Ok((nll / steps as f64).exp())
}

/// `100 · (base − new) / base`.
pub fn perplexity_reduction(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0 && new > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "perplexities must be positive, got {base} and {new}"
        )));
    }
    Ok(100.0 * (base - new) / base)
}

/// Maps a coherence value in `[−1, 1]` to `[0, 100]` as `50·(C + 1)`.
pub fn coherence_score_0_100(c: f64) -> Result<f64> {
    if !(c.abs() <= 1.0 + RANGE_TOL) {
        return Err(Error::InvalidArgument(format!("coherence {c} is outside [-1, 1]")));
    }
    Ok((50.0 * (c + 1.0)).clamp(0.0, 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub accuracy_pct: f64,
    /// Cosine per pair; `None` for pairs with an empty output.
    pub cosines: Vec<Option<f64>>,
    /// Indices of pairs with an empty output, counted as misaligned.
    pub flagged: Vec<usize>,
}

/// Per-pair thresholding of embedding cosines. Pairs without an output
/// embedding count as misaligned and are flagged.
pub fn alignment_from_embeddings(pairs: &[(Vec<f64>, Option<Vec<f64>>)], threshold: f64) -> Result<AlignmentResult> {
    if pairs.is_empty() {
        return Err(Error::Data("semantic alignment needs at least one pair".into()));
    }
    let mut hits = 0;
    let mut cosines = Vec::with_capacity(pairs.len());
    let mut flagged = Vec::new();
    for (i, (p, o)) in pairs.iter().enumerate() {
        match o {
            Some(o) => {
                if p.len() != o.len() {
                    return Err(Error::Shape {
                        op: "semantic alignment",
                        lhs: vec![p.len()],
                        rhs: vec![o.len()],
                    });
                }
                let c = kernels::cosine(p, o).0;
                if c >= threshold {
                    hits += 1;
                }
                cosines.push(Some(c));
            }
            None => {
                flagged.push(i);
                cosines.push(None);
            }
        }
    }
    Ok(AlignmentResult {
        accuracy_pct: 100.0 * hits as f64 / pairs.len() as f64,
        cosines,
        flagged,
    })
}

/// Mean of the final hidden states of `tokens`.
pub fn embed_sequence(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(params, &mut tape, false);
    let out = pv.forward(&mut tape, tokens, None, None)?;
    let pooled = tape.mean_pool_rows(out.hidden, &[0..tokens.len()])?;
    Ok(tape.value(pooled).to_vec())
}

/// Percentage of (prompt, output) pairs whose mean-pooled embeddings have
/// cosine similarity at least `threshold`.
pub fn semantic_alignment_accuracy(
    params: &ModelParams,
    pairs: &[(Vec<usize>, Vec<usize>)],
    threshold: f64,
) -> Result<AlignmentResult> {
    let embedded = pairs
        .iter()
        .map(|(p, o)| {
            let pe = embed_sequence(params, p)?;
            let oe = if o.is_empty() { None } else { Some(embed_sequence(params, o)?) };
            Ok((pe, oe))
        })
        .collect::<Result<Vec<_>>>()?;
    alignment_from_embeddings(&embedded, threshold)
}

/// Counts of per-sample error rates in equal-width bins over `[0, 1]`,
/// per category. Bins are left-closed; the last is also right-closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub bins: usize,
    pub counts: BTreeMap<String, Vec<usize>>,
}

impl ErrorHistogram {
    pub fn bin_edges(&self, bin: usize) -> (f64, f64) {
        (bin as f64 / self.bins as f64, (bin + 1) as f64 / self.bins as f64)
    }

    pub fn total(&self) -> usize {
        self.counts.values().flatten().sum()
    }
}

pub fn error_histogram<S: AsRef<str>>(samples: &[(S, f64)], bins: usize) -> Result<ErrorHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (category, rate) in samples {
        if !(0.0..=1.0).contains(rate) {
            return Err(Error::InvalidArgument(format!("error rate {rate} is outside [0, 1]")));
        }
        let bin = ((rate * bins as f64).floor() as usize).min(bins - 1);
        counts
            .entry(category.as_ref().to_owned())
            .or_insert_with(|| vec![0; bins])[bin] += 1;
    }
    Ok(ErrorHistogram { bins, counts })
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub coherence_score: f64,
    pub perplexity: f64,
    pub perplexity_reduction_pct: f64,
    pub semantic_alignment_pct: f64,
    /// Violation rate of each generated sample.
    pub error_rates: Vec<f64>,
    /// Stratum (or other category) of each generated sample.
    pub categories: Vec<String>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub temperature: f64,
    pub max_tokens: usize,
    pub template: Option<DecodeTemplate>,
    pub alignment_threshold: f64,
    pub tau_c: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            temperature: 1.0,
            max_tokens: 48,
            template: None,
            alignment_threshold: DEFAULT_ALIGNMENT_THRESHOLD,
            tau_c: DEFAULT_TAU_C,
            seed: 0,
        }
    }
}

/// A prompt to continue, with the category its source document belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrompt {
    pub tokens: Vec<usize>,
    pub category: String,
}

/// Scores a model on held-out `sequences` and on continuations of
/// `prompts`.
///
/// Perplexity reduction is measured against `baseline_perplexity`. Each
/// continuation contributes its coherence (over sentence embeddings when it
/// has two or more sentences, token states otherwise) and its violation
/// rate; continuations with fewer than two tokens count as C = −1 with
/// error rate 1.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &str,
    sequences: &[Vec<usize>],
    prompts: &[EvalPrompt],
    baseline_perplexity: f64,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if prompts.is_empty() {
        return Err(Error::Data("evaluation needs at least one prompt".into()));
    }
    let ppl = perplexity(params, sequences)?;
    let reduction = perplexity_reduction(baseline_perplexity, ppl)?;
    let gen_opts = GenerateOptions {
        temperature: opts.temperature,
        max_tokens: opts.max_tokens,
        template: opts.template.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coherence_sum = 0.0;
    let mut error_rates = Vec::with_capacity(prompts.len());
    let mut pairs = Vec::with_capacity(prompts.len());
    for p in prompts {
        let t = generate(params, &p.tokens, &gen_opts, &mut rng)?;
        if t.degenerate {
            coherence_sum -= 1.0;
            error_rates.push(1.0);
        } else {
            let r = coherence_metric(t.coherence_units(), None, opts.tau_c)?;
            coherence_sum += r.coherence;
            error_rates.push(r.violation_rate());
        }
        let content = t.generated[..t.hidden.rows()].to_vec();
        pairs.push((p.tokens.clone(), content));
    }
    let mean_c = coherence_sum / prompts.len() as f64;
    let alignment = semantic_alignment_accuracy(params, &pairs, opts.alignment_threshold)?;
    Ok(EvalResult {
        dataset: dataset.to_owned(),
        coherence_score: coherence_score_0_100(mean_c)?,
        perplexity: ppl,
        perplexity_reduction_pct: reduction,
        semantic_alignment_pct: alignment.accuracy_pct,
        error_rates,
        categories: prompts.iter().map(|p| p.category.clone()).collect(),
        samples: prompts.len(),
    })
}

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{slot, Layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::SEP;

/// Model parameters registered as leaves on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    config: ModelConfig,
    vars: Vec<Var>,
}

impl ParamVars {
    /// Registers every parameter; they receive gradients iff `trainable`.
    pub fn register(params: &ModelParams, tape: &mut Tape, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                let t = Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("consistent");
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        ParamVars {
            config: *params.config(),
            vars,
        }
    }

    /// Wraps already-registered variables given in canonical order.
    pub fn from_vars(config: ModelConfig, vars: Vec<Var>) -> Result<Self> {
        let expected = Layout {
            n_layers: config.n_layers,
        }
        .len();
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameter variables, got {}",
                vars.len()
            )));
        }
        Ok(ParamVars { config, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layout(&self) -> Layout {
        Layout {
            n_layers: self.config.n_layers,
        }
    }

    fn layer(&self, l: usize, offset: usize) -> Var {
        self.vars[self.layout().layer(l, offset)]
    }

    /// Adds the tape gradients into the matching slots of `params`, scaled.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ModelParams, scale: f64) -> Result<()> {
        for (&v, t) in self.vars.iter().zip(params.tensors_mut()) {
            tape.accumulate_into(v, t, scale)?;
        }
        Ok(())
    }
}

/// Inverted dropout with a seeded mask stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, mask)
    }
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[T×V]`
    pub logits: Var,
    /// Final-layer hidden states `[T×d]`.
    pub hidden: Var,
    /// `[S×d]`, present when sentence spans were supplied.
    pub sentences: Option<Var>,
    /// Per layer, per head `[T×T]` attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// Values produced by [`transformer_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub hidden: Tensor,
    pub sentence_embeddings: Option<Tensor>,
    /// Per layer, `[H×T×T]`.
    pub attention: Vec<Tensor>,
}

/// `softmax((q·kᵀ)/√d_k)` row-wise; with `causal`, row `i` attends only to
/// `j ≤ i` and masked weights are exactly zero.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, causal: bool) -> Result<Var> {
    let dk = *tape.shape(q).last().unwrap_or(&0);
    if tape.shape(q).len() != 2 || tape.shape(k).len() != 2 || tape.shape(q)[1] != tape.shape(k)[1] {
        return Err(Error::Shape {
            op: "attention_weights",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    if causal && tape.shape(q)[0] != tape.shape(k)[0] {
        return Err(Error::Shape {
            op: "attention_weights (causal)",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if causal {
        tape.causal_softmax_rows(scores)
    } else {
        tape.softmax_rows(scores)
    }
}

/// `g = σ([residual, transformed]·W + b)`; output
/// `g ⊙ residual + (1 − g) ⊙ transformed`.
pub fn gated_residual(tape: &mut Tape, residual: Var, transformed: Var, weight: Var, bias: Var) -> Result<Var> {
    if tape.shape(residual) != tape.shape(transformed) {
        return Err(Error::Shape {
            op: "gated_residual",
            lhs: tape.shape(residual).to_vec(),
            rhs: tape.shape(transformed).to_vec(),
        });
    }
    let both = tape.concat_cols(&[residual, transformed])?;
    let pre = tape.matmul(both, weight)?;
    let pre = tape.add_row(pre, bias)?;
    let gate = tape.sigmoid(pre)?;
    let diff = tape.sub(residual, transformed)?;
    let gated = tape.mul(gate, diff)?;
    tape.add(transformed, gated)
}

/// Checks that `spans` partition `0..len` into non-empty consecutive pieces.
pub fn validate_spans(spans: &[Range<usize>], len: usize) -> Result<()> {
    let mut expected_start = 0;
    for s in spans {
        if s.start != expected_start {
            return Err(Error::InvalidArgument(format!(
                "sentence spans must be contiguous: expected start {expected_start}, got {s:?}"
            )));
        }
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!("empty sentence span {s:?}")));
        }
        expected_start = s.end;
    }
    if expected_start != len || spans.is_empty() && len > 0 {
        return Err(Error::InvalidArgument(format!(
            "sentence spans cover 0..{expected_start}, expected 0..{len}"
        )));
    }
    Ok(())
}

/// Sentence spans of a token sequence: each span ends just after a `SEP`; a
/// trailing fragment is its own span.
pub fn sentence_spans(tokens: &[usize]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        if t == SEP {
            spans.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push(start..tokens.len());
    }
    spans
}

/// Mean-pools hidden states per sentence, then applies one single-head,
/// non-causal self-attention layer with a residual over the sentence
/// vectors. `proj` holds the query, key, value and output projections.
pub fn hierarchical_encode(tape: &mut Tape, hidden: Var, spans: &[Range<usize>], proj: [Var; 4]) -> Result<Var> {
    validate_spans(spans, tape.shape(hidden)[0])?;
    let pooled = tape.mean_pool_rows(hidden, spans)?;
    let q = tape.matmul(pooled, proj[0])?;
    let k = tape.matmul(pooled, proj[1])?;
    let v = tape.matmul(pooled, proj[2])?;
    let w = attention_weights(tape, q, k, false)?;
    let mixed = tape.matmul(w, v)?;
    let out = tape.matmul(mixed, proj[3])?;
    tape.add(pooled, out)
}

impl ParamVars {
    /// Full forward pass on `tape`. With `spans`, also runs the sentence
    /// encoder over the final hidden states.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        spans: Option<&[Range<usize>]>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardVars> {
        let cfg = self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if t > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {t} exceeds max_len {}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocabulary {}",
                cfg.vocab_size
            )));
        }
        let layout = self.layout();
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.gather_rows(self.vars[Layout::TOKEN_EMB], tokens)?;
        let pos = tape.gather_rows(self.vars[Layout::POS_EMB], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let dk = cfg.head_dim();
        let mut attention = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let a = tape.layer_norm(x, self.layer(l, slot::LN1_GAIN), self.layer(l, slot::LN1_BIAS))?;
            let q = tape.matmul(a, self.layer(l, slot::WQ))?;
            let k = tape.matmul(a, self.layer(l, slot::WK))?;
            let v = tape.matmul(a, self.layer(l, slot::WV))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut maps = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * dk, dk)?;
                let kh = tape.slice_cols(k, h * dk, dk)?;
                let vh = tape.slice_cols(v, h * dk, dk)?;
                let w = attention_weights(tape, qh, kh, true)?;
                maps.push(w);
                heads.push(tape.matmul(w, vh)?);
            }
            attention.push(maps);
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let mut attn_out = tape.matmul(merged, self.layer(l, slot::WO))?;
            if let Some(d) = dropout.as_deref_mut() {
                attn_out = d.apply(tape, attn_out)?;
            }
            x = gated_residual(tape, x, attn_out, self.layer(l, slot::GATE1_W), self.layer(l, slot::GATE1_B))?;

            let b = tape.layer_norm(x, self.layer(l, slot::LN2_GAIN), self.layer(l, slot::LN2_BIAS))?;
            let f = tape.matmul(b, self.layer(l, slot::FF_W1))?;
            let f = tape.add_row(f, self.layer(l, slot::FF_B1))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, self.layer(l, slot::FF_W2))?;
            let mut f = tape.add_row(f, self.layer(l, slot::FF_B2))?;
            if let Some(d) = dropout.as_deref_mut() {
                f = d.apply(tape, f)?;
            }
            x = gated_residual(tape, x, f, self.layer(l, slot::GATE2_W), self.layer(l, slot::GATE2_B))?;
        }

        let hidden = tape.layer_norm(x, self.vars[layout.final_gain()], self.vars[layout.final_bias()])?;
        let logits = tape.matmul(hidden, self.vars[layout.lm_head()])?;
        let sentences = match spans {
            Some(spans) => Some(hierarchical_encode(tape, hidden, spans, self.hier_proj())?),
            None => None,
        };
        Ok(ForwardVars {
            logits,
            hidden,
            sentences,
            attention,
        })
    }

    pub fn hier_proj(&self) -> [Var; 4] {
        let layout = self.layout();
        [0, 1, 2, 3].map(|i| self.vars[layout.hier(i)])
    }
}

/// Value-level forward pass. `spans` must partition the sequence.
pub fn transformer_forward(params: &ModelParams, tokens: &[usize], spans: &[Range<usize>]) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(params, &mut tape, false);
    let out = pv.forward(&mut tape, tokens, Some(spans), None)?;
    let t = tokens.len();
    let attention = out
        .attention
        .iter()
        .map(|heads| {
            let values: Vec<f64> = heads.iter().flat_map(|&h| tape.value(h).iter().copied()).collect();
            Tensor::new(vec![heads.len(), t, t], values).expect("attention maps are T×T")
        })
        .collect();
    Ok(ForwardOutput {
        logits: tape.tensor(out.logits),
        hidden: tape.tensor(out.hidden),
        sentence_embeddings: out.sentences.map(|s| tape.tensor(s)),
        attention,
    })
}

/// Total log-probability of `tokens[1..]` given their prefixes, and the
/// per-step terms.
pub fn log_prob_sequence(params: &ModelParams, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "log_prob_sequence needs at least two tokens".into(),
        ));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(params, &mut tape, false);
    let out = pv.forward(&mut tape, tokens, None, None)?;
    let rows: Vec<usize> = (0..tokens.len() - 1).collect();
    let logits = tape.select_rows(out.logits, &rows)?;
    let lp = tape.log_softmax_pick(logits, &tokens[1..])?;
    let steps = tape.value(lp).to_vec();
    Ok((steps.iter().sum(), steps))
}

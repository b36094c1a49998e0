//! Decoder-only transformer with gated residuals, learned positions and a
//! sentence-level (hierarchical) encoder over the final hidden states.

mod forward;
mod generate;

pub use forward::{
    attention_weights, gated_residual, hierarchical_encode, log_prob_sequence, sentence_spans, transformer_forward,
    validate_spans, Dropout, ForwardOutput, ForwardVars, ParamVars,
};
pub use generate::{generate, DecodeTemplate, GenerateOptions, StepConstraint, MASKED_LOGIT};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 300,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| Err(Error::config(field, reason));
        if self.vocab_size < crate::tokenizer::bpe::RESERVED {
            return fail("vocab_size", format!("must cover the reserved ids, got {}", self.vocab_size));
        }
        if self.d_model < 2 {
            return fail("d_model", format!("must be at least 2, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(
                "n_heads",
                format!("must divide d_model = {}, got {}", self.d_model, self.n_heads),
            );
        }
        if self.max_len < 2 {
            return fail("max_len", format!("must be at least 2, got {}", self.max_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, l, t) = (self.vocab_size, self.d_model, self.n_layers, self.max_len);
        let per_layer = 16 * d * d + 11 * d;
        2 * v * d + t * d + l * per_layer + 2 * d + 4 * d * d
    }

    /// Tensor shapes in canonical order, with their names.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, t) = (self.vocab_size, self.d_model, self.max_len);
        let mut out = vec![
            ("token_embedding".to_owned(), vec![v, d]),
            ("position_embedding".to_owned(), vec![t, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.query"), vec![d, d]),
                (p("attn.key"), vec![d, d]),
                (p("attn.value"), vec![d, d]),
                (p("attn.output"), vec![d, d]),
                (p("gate1.weight"), vec![2 * d, d]),
                (p("gate1.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ff.w1"), vec![d, 4 * d]),
                (p("ff.b1"), vec![4 * d]),
                (p("ff.w2"), vec![4 * d, d]),
                (p("ff.b2"), vec![d]),
                (p("gate2.weight"), vec![2 * d, d]),
                (p("gate2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("final_ln.gain".to_owned(), vec![d]),
            ("final_ln.bias".to_owned(), vec![d]),
            ("lm_head".to_owned(), vec![d, v]),
            ("hier.query".to_owned(), vec![d, d]),
            ("hier.key".to_owned(), vec![d, d]),
            ("hier.value".to_owned(), vec![d, d]),
            ("hier.output".to_owned(), vec![d, d]),
        ]);
        out
    }

    /// Layer-group of each tensor for layer-wise learning-rate decay:
    /// embeddings are group 0, block `l` is group `l + 1`, and the output
    /// side (final norm, LM head, sentence encoder) is the topmost group.
    pub fn layer_groups(&self) -> Vec<usize> {
        let mut g = vec![0, 0];
        for l in 0..self.n_layers {
            g.extend(std::iter::repeat_n(l + 1, LAYER_SLOTS));
        }
        g.extend(std::iter::repeat_n(self.n_layers + 1, 7));
        g
    }

    pub fn num_layer_groups(&self) -> usize {
        self.n_layers + 2
    }
}

pub(crate) const LAYER_SLOTS: usize = 16;

/// Slot offsets within one transformer block.
pub(crate) mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const GATE1_W: usize = 6;
    pub const GATE1_B: usize = 7;
    pub const LN2_GAIN: usize = 8;
    pub const LN2_BIAS: usize = 9;
    pub const FF_W1: usize = 10;
    pub const FF_B1: usize = 11;
    pub const FF_W2: usize = 12;
    pub const FF_B2: usize = 13;
    pub const GATE2_W: usize = 14;
    pub const GATE2_B: usize = 15;
}

/// Positions of the non-block tensors in the canonical order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub n_layers: usize,
}

impl Layout {
    pub const TOKEN_EMB: usize = 0;
    pub const POS_EMB: usize = 1;

    pub fn layer(&self, l: usize, offset: usize) -> usize {
        2 + l * LAYER_SLOTS + offset
    }
    fn tail(&self) -> usize {
        2 + self.n_layers * LAYER_SLOTS
    }
    pub fn final_gain(&self) -> usize {
        self.tail()
    }
    pub fn final_bias(&self) -> usize {
        self.tail() + 1
    }
    pub fn lm_head(&self) -> usize {
        self.tail() + 2
    }
    pub fn hier(&self, i: usize) -> usize {
        self.tail() + 3 + i
    }
    pub fn len(&self) -> usize {
        self.tail() + 7
    }
}

/// All learnable tensors, stored in the canonical order of
/// [`ModelConfig::layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

const INIT_STD: f64 = 0.02;
const GATE_BIAS_INIT: f64 = 1.0;

impl ModelParams {
    /// Normal(0, 0.02) weights, unit norm gains, zero biases, and gate biases
    /// of +1 so gates start mostly open toward the residual path.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(&shape);
                if name.ends_with(".gain") {
                    t.values_mut().fill(1.0);
                } else if name.ends_with("gate1.bias") || name.ends_with("gate2.bias") {
                    t.values_mut().fill(GATE_BIAS_INIT);
                } else if shape.len() == 2 {
                    t.values_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
                }
                t.set_requires_grad(true);
                t
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    /// Builds parameters from tensors in canonical order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model parameter",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                })
                .map_err(|e| Error::Format(format!("{name}: {e}")));
            }
        }
        let tensors = tensors.into_iter().map(|t| t.with_requires_grad(true)).collect();
        Ok(ModelParams { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }


    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies of every gradient slot (zeros where unset), in canonical order.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    /// Global L2 norm over all gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Mutable named views of every gradient slot, for clipping.
    pub fn named_grads_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names = self.names();
        names
            .into_iter()
            .zip(self.tensors.iter_mut())
            .map(|(n, t)| (n, t.grad_mut()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

//! Two-stage training: cross-entropy pretraining with the structural
//! alignment term, then policy-gradient fine-tuning on trajectory rewards.
//! Also the optimizer, learning-rate schedule, early stopping, checkpoints,
//! the per-step training log and grid expansion for sweeps.

mod checkpoint;
mod finetune;
mod log;
mod optim;
mod pretrain;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use finetune::{finetune_rl, FinetuneSummary, RewardFn};
pub use log::{Stage, TrainLog, TrainRecord};
pub use optim::{adam_step, layerwise_lr, tensor_learning_rates, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use pretrain::{
    accumulate_batch_gradient, early_stop_check, evaluate_loss, pretrain, sequence_loss, PretrainSummary,
    EARLY_STOP_MIN_DELTA,
};
pub use sweep::{expand_grid, SweepCell, SweepGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecodeTemplate;
use crate::objectives::{EntropyMode, DEFAULT_BETA, DEFAULT_CLIP, DEFAULT_LAMBDA, DEFAULT_MU, DEFAULT_RHO, DEFAULT_TAU_C};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Micro-batches summed into each optimizer step.
    pub accumulation_steps: usize,
    pub epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub beta: f64,
    pub mu: f64,
    pub rho: f64,
    pub clip: f64,
    /// Per-layer learning-rate decay factor γ; 1 disables decay.
    pub layer_decay: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Epochs between validation evaluations; 0 disables them.
    pub eval_interval: usize,
    pub dropout: f64,
    pub tau_c: f64,
    pub rl_iterations: usize,
    /// Trajectories sampled per fine-tuning iteration.
    pub rollouts: usize,
    pub max_new_tokens: usize,
    pub entropy_mode: EntropyMode,
    pub template: Option<DecodeTemplate>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            accumulation_steps: 1,
            epochs: 10,
            patience: 3,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            mu: DEFAULT_MU,
            rho: DEFAULT_RHO,
            clip: DEFAULT_CLIP,
            layer_decay: 1.0,
            temperature: 1.0,
            seed: 0,
            eval_interval: 1,
            dropout: 0.0,
            tau_c: DEFAULT_TAU_C,
            rl_iterations: 50,
            rollouts: 8,
            max_new_tokens: 48,
            entropy_mode: EntropyMode::Bonus,
            template: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("learning_rate", self.learning_rate),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("mu", self.mu),
            ("temperature", self.temperature),
            ("tau_c", self.tau_c),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be a finite value ≥ 0, got {v}")));
            }
        }
        let at_least_one = [
            ("batch_size", self.batch_size),
            ("accumulation_steps", self.accumulation_steps),
            ("patience", self.patience),
            ("rollouts", self.rollouts),
            ("max_new_tokens", self.max_new_tokens),
        ];
        for (field, v) in at_least_one {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("rho", format!("must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config("clip", format!("must be a finite value > 0, got {}", self.clip)));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config(
                "layer_decay",
                format!("must lie in (0, 1], got {}", self.layer_decay),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        if let Some(t) = &self.template {
            if t.max_sentences.is_some_and(|m| m < t.min_sentences) {
                return Err(Error::config("template", "max_sentences is below min_sentences"));
            }
        }
        Ok(())
    }

    /// Sequences per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: Vec<(&str, TrainConfig)> = vec![
            ("lambda", TrainConfig { lambda: -0.5, ..Default::default() }),
            ("patience", TrainConfig { patience: 0, ..Default::default() }),
            ("layer_decay", TrainConfig { layer_decay: 1.5, ..Default::default() }),
            ("rho", TrainConfig { rho: 1.0, ..Default::default() }),
            ("clip", TrainConfig { clip: 0.0, ..Default::default() }),
        ];
        for (field, cfg) in cases {
            match cfg.validate() {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lamda": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
        let cfg: TrainConfig = serde_json::from_str(r#"{"lambda": 0.1}"#).unwrap();
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.batch_size, 8);
    }
}

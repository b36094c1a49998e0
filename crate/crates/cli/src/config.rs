//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use ncrf_core::eval::EvalOptions;
use ncrf_core::model::ModelConfig;
use ncrf_core::tokenizer::BASE_VOCAB;
use ncrf_core::training::{SweepGrid, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL corpus with one `{"text": ...}` object per line.
    pub corpus: PathBuf,
    pub target_vocab: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: PathBuf::from("data/sample/corpus.jsonl"),
            target_vocab: 320,
            validation_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Model shape; the vocabulary size comes from the trained tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            max_len: 96,
        }
    }
}

impl ModelDims {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub prompt: String,
    pub samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            prompt: String::new(),
            samples: 4,
            temperature: 1.0,
            max_tokens: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random stream of every stage.
    pub seed: u64,
    pub out: PathBuf,
    /// Row label used in reports.
    pub dataset_name: String,
    pub data: DataConfig,
    pub model: ModelDims,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalOptions,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset_name: "Sample Corpus".into(),
            data: DataConfig::default(),
            model: ModelDims::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalOptions::default(),
            sweep: SweepGrid::default(),
        }
    }
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Core(ncrf_core::Error::Config {
        field: field.into(),
        reason: reason.to_string(),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed into every stage.
    pub fn propagate_seed(&mut self) {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.eval.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.data.target_vocab < BASE_VOCAB {
            return Err(invalid(
                "data.target_vocab",
                format!("must be at least {BASE_VOCAB}, got {}", self.data.target_vocab),
            ));
        }
        self.model.with_vocab(self.data.target_vocab).validate().map_err(prefixed("model"))?;
        self.pretrain.validate().map_err(prefixed("pretrain"))?;
        self.finetune.validate().map_err(prefixed("finetune"))?;
        if self.generate.samples == 0 {
            return Err(invalid("generate.samples", "must be at least 1"));
        }
        if self.generate.max_tokens == 0 {
            return Err(invalid("generate.max_tokens", "must be at least 1"));
        }
        for (field, t) in [("generate.temperature", self.generate.temperature), ("eval.temperature", self.eval.temperature)] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(invalid(field, format!("must be a finite value ≥ 0, got {t}")));
            }
        }
        if self.eval.max_tokens == 0 {
            return Err(invalid("eval.max_tokens", "must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.eval.alignment_threshold) {
            return Err(invalid(
                "eval.alignment_threshold",
                format!("must lie in [-1, 1], got {}", self.eval.alignment_threshold),
            ));
        }
        Ok(())
    }
}

fn prefixed(section: &'static str) -> impl Fn(ncrf_core::Error) -> CliError {
    move |e| match e {
        ncrf_core::Error::Config { field, reason } => invalid(&format!("{section}.{field}"), reason),
        other => CliError::Core(other),
    }
}

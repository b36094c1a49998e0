//! Transformer language model with coherence-reward policy-gradient
//! fine-tuning, plus the tokenizer, data pipeline, evaluation metrics and
//! reporting that surround it.

pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod training;
pub mod tokenizer;

pub use error::{Error, Result};

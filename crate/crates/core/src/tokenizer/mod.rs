//! Corpus ingestion, byte-pair encoding, sentence segmentation and dataset
//! construction.

pub mod bpe;
pub mod dataset;
pub mod text;

pub use bpe::{train_bpe, BpeModel, BASE_VOCAB, BOS, EOS, PAD, SEP};
pub use dataset::{
    chunk_sequence, prepare, stratify_by_complexity, DatasetManifest, PrepareOptions, PreparedDataset, Split,
    Stratum,
};
pub use text::{load_corpus, normalize, segment_sentences, sentences};

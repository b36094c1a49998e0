//! Dataset construction: complexity stratification, train/validation/test
//! splits, the manifest, and the encoded split files.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpe::{train_bpe, BpeModel, BOS, EOS};
use super::text::segment_sentences;
use crate::error::{Error, Result};

pub const DATA_MAGIC: &[u8; 8] = b"NCRFDATA";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub strata: Vec<Stratum>,
    /// Largest sentence count assigned to `low`.
    pub low_max: usize,
    /// Largest sentence count assigned to `medium`.
    pub medium_max: usize,
    pub warnings: Vec<String>,
}

/// Buckets documents into terciles of sentence count. Ties land in the lower
/// stratum.
pub fn stratify_by_complexity<S: AsRef<str>>(docs: &[S]) -> Stratification {
    let counts: Vec<usize> = docs.iter().map(|d| segment_sentences(d.as_ref()).len()).collect();
    stratify_counts(&counts)
}

pub fn stratify_counts(counts: &[usize]) -> Stratification {
    let n = counts.len();
    if n < 3 {
        return Stratification {
            strata: vec![Stratum::Low; n],
            low_max: counts.iter().copied().max().unwrap_or(0),
            medium_max: counts.iter().copied().max().unwrap_or(0),
            warnings: vec![format!(
                "only {n} document(s); fewer than 3 cannot be stratified, all assigned to low"
            )],
        };
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let low_max = sorted[n.div_ceil(3) - 1];
    let medium_max = sorted[(2 * n).div_ceil(3) - 1];
    let strata = counts
        .iter()
        .map(|&c| {
            if c <= low_max {
                Stratum::Low
            } else if c <= medium_max {
                Stratum::Medium
            } else {
                Stratum::High
            }
        })
        .collect();
    Stratification {
        strata,
        low_max,
        medium_max,
        warnings: Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessingStep {
    EncodingStandardization,
    WhitespaceNormalization,
    ControlCharacterRemoval,
    SentenceSegmentation,
    ComplexityStratification,
    Tokenization,
    /// Label only; no implementation.
    SemanticSegmentation,
    /// Label only; no implementation.
    DuplicationRemoval,
}

pub const APPLIED_STEPS: &[PreprocessingStep] = &[
    PreprocessingStep::EncodingStandardization,
    PreprocessingStep::WhitespaceNormalization,
    PreprocessingStep::ControlCharacterRemoval,
    PreprocessingStep::SentenceSegmentation,
    PreprocessingStep::ComplexityStratification,
    PreprocessingStep::Tokenization,
];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub low: usize,
    pub medium: usize,
    pub high: usize,
}

impl StratumCounts {
    fn add(&mut self, s: Stratum) {
        match s {
            Stratum::Low => self.low += 1,
            Stratum::Medium => self.medium += 1,
            Stratum::High => self.high += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub name: String,
    pub file: String,
    pub samples: usize,
    pub tokens: usize,
    pub mean_token_length: f64,
    pub strata: StratumCounts,
    pub preprocessing: Vec<PreprocessingStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub split: String,
    /// Position of the document in the loaded corpus.
    pub source_index: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocab_size: usize,
    pub low_max_sentences: usize,
    pub medium_max_sentences: usize,
    pub splits: Vec<SplitRecord>,
    /// Documents in split order, then in stored order within each split.
    pub documents: Vec<DocumentRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub target_vocab: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            target_vocab: 320,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

/// A split held in memory: one encoded sequence per document.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub documents: Vec<Vec<usize>>,
    pub texts: Vec<String>,
    pub strata: Vec<Stratum>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub tokenizer: BpeModel,
    pub manifest: DatasetManifest,
    pub splits: Vec<Split>,
}

pub const TRAIN: &str = "train";
pub const VALIDATION: &str = "validation";
pub const TEST: &str = "test";

impl PreparedDataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// Writes `manifest.json`, `tokenizer.json` and one `<split>.bin` per
    /// split into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)?;
        write_json(&dir.join("tokenizer.json"), &self.tokenizer)?;
        for (split, record) in self.splits.iter().zip(&self.manifest.splits) {
            let stream: Vec<usize> = split.documents.concat();
            write_token_file(&dir.join(&record.file), &stream)?;
        }
        let texts: Vec<serde_json::Value> = self
            .splits
            .iter()
            .flat_map(|s| s.texts.iter().map(move |t| serde_json::json!({"split": s.name, "text": t})))
            .collect();
        let mut f = fs::File::create(dir.join("documents.jsonl")).map_err(|e| Error::io(dir, e))?;
        for t in texts {
            writeln!(f, "{t}").map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    /// Reads a dataset written by [`PreparedDataset::write`] and checks the
    /// stored token files against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        let tokenizer: BpeModel = read_json(&dir.join("tokenizer.json"))?;
        let texts_path = dir.join("documents.jsonl");
        let all_texts: Vec<(String, String)> = fs::read_to_string(&texts_path)
            .map_err(|e| Error::io(&texts_path, e))?
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l)?;
                Ok((
                    v["split"].as_str().unwrap_or_default().to_owned(),
                    v["text"].as_str().unwrap_or_default().to_owned(),
                ))
            })
            .collect::<Result<_>>()?;
        let mut splits = Vec::new();
        for record in &manifest.splits {
            let stream = read_token_file(&dir.join(&record.file))?;
            let documents = split_documents(&stream);
            if documents.len() != record.samples {
                return Err(Error::Data(format!(
                    "split {} stores {} documents but the manifest records {}",
                    record.name,
                    documents.len(),
                    record.samples
                )));
            }
            let texts = all_texts
                .iter()
                .filter(|(s, _)| *s == record.name)
                .map(|(_, t)| t.clone())
                .collect();
            let strata = manifest
                .documents
                .iter()
                .filter(|d| d.split == record.name)
                .map(|d| d.stratum)
                .collect();
            splits.push(Split {
                name: record.name.clone(),
                documents,
                texts,
                strata,
            });
        }
        Ok(PreparedDataset {
            tokenizer,
            manifest,
            splits,
        })
    }
}

/// Normalized documents → stratified, tokenized train/validation/test splits.
/// The tokenizer is trained on the sentences of the training split.
pub fn prepare(docs: &[String], opts: &PrepareOptions) -> Result<PreparedDataset> {
    if docs.is_empty() {
        return Err(Error::Data("no documents".into()));
    }
    for (name, f) in [
        ("validation_fraction", opts.validation_fraction),
        ("test_fraction", opts.test_fraction),
    ] {
        if !(0.0..0.5).contains(&f) {
            return Err(Error::config(name, format!("must be in [0, 0.5), got {f}")));
        }
    }
    let strat = stratify_by_complexity(docs);

    let n = docs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let held_out = |f: f64| if n >= 3 && f > 0.0 { ((n as f64 * f).round() as usize).max(1) } else { 0 };
    let n_test = held_out(opts.test_fraction);
    let n_val = held_out(opts.validation_fraction);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut val: Vec<usize> = order[n_test..n_test + n_val].to_vec();
    let mut train: Vec<usize> = order[n_test + n_val..].to_vec();
    for s in [&mut train, &mut val, &mut test] {
        s.sort_unstable();
    }

    let train_sentences: Vec<&str> = train
        .iter()
        .flat_map(|&i| super::text::sentences(&docs[i]))
        .collect();
    if train_sentences.is_empty() {
        return Err(Error::Data("training split has no text".into()));
    }
    let tokenizer = train_bpe(&train_sentences, opts.target_vocab)?;

    let mut splits = Vec::new();
    let mut records = Vec::new();
    let mut documents = Vec::new();
    for (name, idx) in [(TRAIN, &train), (VALIDATION, &val), (TEST, &test)] {
        let encoded: Vec<Vec<usize>> = idx.iter().map(|&i| tokenizer.encode_document(&docs[i])).collect();
        let mut counts = StratumCounts::default();
        for (&i, enc) in idx.iter().zip(&encoded) {
            counts.add(strat.strata[i]);
            documents.push(DocumentRecord {
                split: name.to_owned(),
                source_index: i,
                sentences: segment_sentences(&docs[i]).len(),
                tokens: enc.len(),
                stratum: strat.strata[i],
            });
        }
        let tokens: usize = encoded.iter().map(Vec::len).sum();
        records.push(SplitRecord {
            name: name.to_owned(),
            file: format!("{name}.bin"),
            samples: encoded.len(),
            tokens,
            mean_token_length: if encoded.is_empty() { 0.0 } else { tokens as f64 / encoded.len() as f64 },
            strata: counts,
            preprocessing: APPLIED_STEPS.to_vec(),
        });
        splits.push(Split {
            name: name.to_owned(),
            documents: encoded,
            texts: idx.iter().map(|&i| docs[i].clone()).collect(),
            strata: idx.iter().map(|&i| strat.strata[i]).collect(),
        });
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        vocab_size: tokenizer.vocab_size(),
        low_max_sentences: strat.low_max,
        medium_max_sentences: strat.medium_max,
        splits: records,
        documents,
        warnings: strat.warnings,
    };
    Ok(PreparedDataset {
        tokenizer,
        manifest,
        splits,
    })
}

/// Splits a flat id stream into `BOS … EOS` documents.
pub fn split_documents(stream: &[usize]) -> Vec<Vec<usize>> {
    let mut docs = Vec::new();
    let mut current: Option<Vec<usize>> = None;
    for &id in stream {
        if id == BOS {
            current = Some(vec![BOS]);
        } else if let Some(doc) = current.as_mut() {
            doc.push(id);
            if id == EOS {
                docs.extend(current.take());
            }
        }
    }
    docs
}

/// Cuts a sequence into windows of at most `max_len` tokens that overlap by
/// one token, so every next-token transition is predicted exactly once.
pub fn chunk_sequence(seq: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    assert!(max_len >= 2, "chunk length must allow one prediction");
    if seq.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(seq.len());
        out.push(seq[start..end].to_vec());
        if end == seq.len() {
            break;
        }
        start = end - 1;
    }
    out
}

/// `NCRFDATA` followed by little-endian `u32` token ids.
pub fn write_token_file(path: &Path, ids: &[usize]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * ids.len());
    bytes.extend_from_slice(DATA_MAGIC);
    for &id in ids {
        let id = u32::try_from(id).map_err(|_| Error::Data(format!("token id {id} exceeds u32")))?;
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format(format!("{}: missing NCRFDATA header", path.display())));
    }
    let body = &bytes[8..];
    if body.len() % 4 != 0 {
        return Err(Error::Size {
            what: format!("{} token payload", path.display()),
            expected: body.len() / 4 * 4 + 4,
            actual: body.len(),
        });
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn terciles_one_per_stratum() {
        let s = stratify_counts(&[1, 5, 20]);
        assert_eq!(s.strata, vec![Stratum::Low, Stratum::Medium, Stratum::High]);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn identical_counts_all_low() {
        let s = stratify_counts(&[4, 4, 4, 4, 4]);
        assert!(s.strata.iter().all(|&x| x == Stratum::Low));
    }

    #[test]
    fn too_few_documents_warn() {
        let s = stratify_counts(&[3, 9]);
        assert_eq!(s.strata, vec![Stratum::Low, Stratum::Low]);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn stratify_from_text() {
        let docs = ["One.", "One. Two. Three.", "A. B. C. D. E. F."];
        let s = stratify_by_complexity(&docs);
        assert_eq!(s.strata, vec![Stratum::Low, Stratum::Medium, Stratum::High]);
        assert_eq!((s.low_max, s.medium_max), (1, 3));
    }

    #[test]
    fn chunks_overlap_by_one() {
        let seq: Vec<usize> = (0..10).collect();
        let chunks = chunk_sequence(&seq, 4);
        assert_eq!(chunks, vec![vec![0, 1, 2, 3], vec![3, 4, 5, 6], vec![6, 7, 8, 9]]);
        let transitions: usize = chunks.iter().map(|c| c.len() - 1).sum();
        assert_eq!(transitions, 9);
        assert_eq!(chunk_sequence(&seq[..3], 8), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn token_file_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_token_file(&p, &[1, 300, 2]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"NCRFDATA");
        assert_eq!(bytes.len(), 8 + 12);
        assert_eq!(read_token_file(&p).unwrap(), vec![1, 300, 2]);
        fs::write(&p, b"BADMAGIC").unwrap();
        assert!(read_token_file(&p).is_err());
    }

    #[test]
    fn prepare_and_reload() {
        let docs: Vec<String> = (0..12)
            .map(|i| (0..=i % 4).map(|j| format!("Item {j} of doc {i}.")).collect::<Vec<_>>().join(" "))
            .collect();
        let data = prepare(&docs, &PrepareOptions { target_vocab: 280, ..Default::default() }).unwrap();
        let total: usize = data.manifest.splits.iter().map(|s| s.samples).sum();
        assert_eq!(total, 12);
        for split in &data.splits {
            for (doc, text) in split.documents.iter().zip(&split.texts) {
                assert_eq!(&data.tokenizer.decode(doc).unwrap(), text);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        let back = PreparedDataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, data.manifest);
        assert_eq!(back.splits, data.splits);
    }
}

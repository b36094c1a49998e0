use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::tokenizer::dataset::{read_json, write_json};
use crate::tokenizer::BpeModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NCRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub tokenizer: Option<BpeModel>,
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    /// Validation losses (or other tracked metric) so far.
    pub metric_history: Vec<f64>,
    /// Order and shapes of the tensors in `params.bin`.
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, tokenizer: Option<BpeModel>, config: Option<TrainConfig>) -> Self {
        let tensors = params
            .config()
            .layout()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect();
        Checkpoint {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                model: *params.config(),
                tokenizer,
                config,
                epoch: 0,
                metric_history: Vec::new(),
                tensors,
            },
            params,
        }
    }

    pub fn with_progress(mut self, epoch: usize, metric_history: Vec<f64>) -> Self {
        self.manifest.epoch = epoch;
        self.manifest.metric_history = metric_history;
        self
    }
}

/// Writes `manifest.json` and `params.bin` into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = checkpoint.params.num_parameters();
    let mut blob = Vec::with_capacity(HEADER_LEN + 8 * n);
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&checkpoint.manifest.version.to_le_bytes());
    for t in checkpoint.params.tensors() {
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &checkpoint.manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    manifest.model.validate()?;
    let layout = manifest.model.layout();
    let declared: Vec<(String, Vec<usize>)> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if declared != layout {
        return Err(Error::Format(
            "checkpoint tensor list does not match the model configuration".into(),
        ));
    }

    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.len() < HEADER_LEN || &blob[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint blob", path.display())));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let expected = HEADER_LEN + 8 * count;
    if blob.len() != expected {
        return Err(Error::Size {
            what: PARAMS_FILE.into(),
            expected,
            actual: blob.len(),
        });
    }
    let mut values = blob[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = layout
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(manifest.model, tensors)?;
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 270,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            max_len: 6,
        };
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        Checkpoint::new(p, Some(BpeModel::byte_level()), Some(TrainConfig::default())).with_progress(3, vec![2.5, 2.1])
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        save_checkpoint(dir.path(), &ck).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn version_and_size_guards() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = sample();
        ck.manifest.version = CHECKPOINT_VERSION + 1;
        save_checkpoint(dir.path(), &ck).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { found: 2, expected: 1 })));

        save_checkpoint(dir.path(), &sample()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let blob = fs::read(&p).unwrap();
        fs::write(&p, &blob[..blob.len() - 8]).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Size { expected, actual, .. }) => assert_eq!(expected, actual + 8),
            other => panic!("unexpected {other:?}"),
        }
    }
}

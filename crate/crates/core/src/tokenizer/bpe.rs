//! Byte-level byte-pair encoding.
//!
//! Ids `0..4` are reserved for PAD, BOS, EOS and SEP; ids `4..260` are the
//! 256 single bytes; every learned merge appends one id after that. Because
//! all bytes are in the base vocabulary no input is ever out of vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Sentence boundary marker.
pub const SEP: usize = 3;
pub const RESERVED: usize = 4;
pub const BASE_VOCAB: usize = RESERVED + 256;

pub fn is_special(id: usize) -> bool {
    id < RESERVED
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(u32, u32)>,
    token_bytes: Vec<Vec<u8>>,
    token_ids: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

impl BpeModel {
    /// A tokenizer with no merges (pure byte-level).
    pub fn byte_level() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    /// Rebuilds a model from its ordered merge list.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..RESERVED).map(|_| Vec::new()).collect();
        token_bytes.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let known = token_bytes.len() as u32;
            if a >= known || b >= known || is_special(a as usize) || is_special(b as usize) {
                return Err(Error::Tokenizer(format!(
                    "merge {rank} ({a}, {b}) references an unknown or reserved id"
                )));
            }
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate merge ({a}, {b})")));
            }
        }
        let token_ids = token_bytes
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(i, b)| (b.clone(), i as u32))
            .collect();
        Ok(BpeModel {
            merges,
            token_bytes,
            token_ids,
            ranks,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.token_bytes.len()
    }

    /// Bytes of a (non-special) token.
    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        if is_special(id) {
            return None;
        }
        self.token_bytes.get(id).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<usize> {
        self.token_ids.get(bytes).map(|&i| i as usize)
    }

    /// Encodes text by applying the learned merges in training order.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<u32> = text.bytes().map(|b| b as u32 + RESERVED as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let new_id = (BASE_VOCAB + rank as usize) as u32;
            merge_pair(&mut ids, (a, b), new_id);
        }
        ids.into_iter().map(|i| i as usize).collect()
    }

    /// Decodes ids to text. PAD, BOS and EOS render as nothing; SEP renders
    /// as a single space between sentences. Invalid UTF-8 (possible for
    /// arbitrary id sequences) is replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::new();
        let mut pending_space = false;
        for &id in ids {
            if id >= self.token_bytes.len() {
                return Err(Error::Tokenizer(format!(
                    "unknown token id {id} (vocabulary size {})",
                    self.token_bytes.len()
                )));
            }
            if id == SEP {
                pending_space = true;
                continue;
            }
            if is_special(id) {
                continue;
            }
            if pending_space && !bytes.is_empty() {
                bytes.push(b' ');
            }
            pending_space = false;
            bytes.extend_from_slice(&self.token_bytes[id]);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// `BOS s₁ SEP s₂ SEP … sₙ SEP EOS` over the sentences of `text`.
    pub fn encode_document(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        for sentence in super::text::sentences(text) {
            ids.extend(self.encode(sentence));
            ids.push(SEP);
        }
        ids.push(EOS);
        ids
    }
}

fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// Learns merges greedily: the most frequent adjacent pair is merged until
/// the vocabulary reaches `target_vocab` or no pair occurs at least twice.
/// Frequency ties go to the lexicographically smallest pair of byte strings.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("cannot train on an empty corpus".into()));
    }
    if target_vocab < BASE_VOCAB {
        return Err(Error::Tokenizer(format!(
            "target vocabulary {target_vocab} is below the base size {BASE_VOCAB}"
        )));
    }

    // Identical units are counted once with a multiplicity.
    let mut units: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        *units.entry(s.as_ref()).or_default() += 1;
    }
    let mut units: Vec<(Vec<u32>, usize)> = units
        .into_iter()
        .map(|(s, n)| (s.bytes().map(|b| b as u32 + RESERVED as u32).collect(), n))
        .collect();
    units.sort();

    let mut model = BpeModel::byte_level();
    while model.vocab_size() < target_vocab {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, n) in &units {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&model.token_bytes[pa.0 as usize], &model.token_bytes[pa.1 as usize]);
                    let kb = (&model.token_bytes[pb.0 as usize], &model.token_bytes[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some((pair, _)) = best else { break };
        let new_id = model.vocab_size() as u32;
        for (ids, _) in &mut units {
            merge_pair(ids, pair, new_id);
        }
        let mut merges = model.merges.clone();
        merges.push(pair);
        model = BpeModel::from_merges(merges)?;
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    merges: Vec<(u32, u32)>,
}

impl Serialize for BpeModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BpeFile {
            merges: self.merges.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BpeModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = BpeFile::deserialize(d)?;
        BpeModel::from_merges(file.merges).map_err(serde::de::Error::custom)
    }
}

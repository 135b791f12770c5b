//! Byte-level byte-pair-encoding tokenizer.
//!
//! Ids `0..=255` are the raw bytes, id 256 is the reserved end-of-text
//! marker, and every id after that is a learned merge in creation order.
//! Because every byte is a base token, any input encodes and
//! `decode(encode(x)) == x` holds for arbitrary bytes.
//!
//! Merges are learned without any pre-tokenization, so they may span
//! whitespace.

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const BYTE_TOKENS: usize = 256;
pub const END_OF_TEXT: TokenId = 256;
pub const END_OF_TEXT_TEXT: &[u8] = b"<|endoftext|>";
/// 256 bytes plus end-of-text.
pub const MIN_VOCAB_SIZE: usize = BYTE_TOKENS + 1;
pub const DEFAULT_VOCAB_SIZE: usize = 512;
const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub merged: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    subwords: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    end_of_text: TokenId,
    /// pair -> (rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

/// Corpus length in tokens before (raw bytes) and after merge learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionStats {
    pub tokens_before: usize,
    pub tokens_after: usize,
}

impl CompressionStats {
    pub fn bytes_per_token(&self) -> f64 {
        if self.tokens_after == 0 {
            0.0
        } else {
            self.tokens_before as f64 / self.tokens_after as f64
        }
    }
}

impl Vocabulary {
    /// The 257-entry vocabulary with no merges.
    pub fn byte_level() -> Self {
        let mut subwords: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        subwords.push(END_OF_TEXT_TEXT.to_vec());
        Self {
            subwords,
            merges: Vec::new(),
            end_of_text: END_OF_TEXT,
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let merged = self.subwords.len() as TokenId;
        let mut bytes = self.subwords[left as usize].clone();
        bytes.extend_from_slice(&self.subwords[right as usize]);
        self.subwords.push(bytes);
        self.ranks.insert((left, right), (self.merges.len(), merged));
        self.merges.push(Merge {
            left,
            right,
            merged,
        });
        merged
    }

    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subwords.is_empty()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn end_of_text(&self) -> TokenId {
        self.end_of_text
    }

    pub fn subword(&self, id: TokenId) -> Option<&[u8]> {
        self.subwords.get(id as usize).map(Vec::as_slice)
    }

    /// Tokenizes `text` by applying learned merges in creation order.
    pub fn encode(&self, text: &[u8]) -> TokenSequence {
        let mut ids: Vec<TokenId> = text.iter().map(|&b| TokenId::from(b)).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, w[0], w[1], merged)))
                .min();
            let Some((_, left, right, merged)) = best else {
                break;
            };
            ids = merge_pair(&ids, left, right, merged);
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let bytes = self.subword(id).ok_or_else(|| {
                Error::Input(format!("token id {id} out of range for vocabulary of size {}", self.len()))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Checks every structural invariant: contiguous ids, byte coverage,
    /// merges that concatenate their parts, and a reserved end-of-text id.
    pub fn validate(&self) -> Result<()> {
        if self.subwords.len() < MIN_VOCAB_SIZE {
            return Err(Error::Input(format!(
                "vocabulary has {} entries, needs at least {MIN_VOCAB_SIZE}",
                self.subwords.len()
            )));
        }
        for b in 0..BYTE_TOKENS {
            if self.subwords[b] != [b as u8] {
                return Err(Error::Input(format!("id {b} must be the single byte {b:#04x}")));
            }
        }
        if self.end_of_text != END_OF_TEXT {
            return Err(Error::Input(format!("end_of_text must be id {END_OF_TEXT}")));
        }
        if self.merges.len() + MIN_VOCAB_SIZE != self.subwords.len() {
            return Err(Error::Input(format!(
                "{} entries but {} merges",
                self.subwords.len(),
                self.merges.len()
            )));
        }
        for (rank, m) in self.merges.iter().enumerate() {
            let expected_id = (MIN_VOCAB_SIZE + rank) as TokenId;
            if m.merged != expected_id {
                return Err(Error::Input(format!("merge {rank} produces id {}, expected {expected_id}", m.merged)));
            }
            if m.left == self.end_of_text || m.right == self.end_of_text || m.left >= m.merged || m.right >= m.merged {
                return Err(Error::Input(format!("merge {rank} has invalid operands")));
            }
            let mut concat = self.subwords[m.left as usize].clone();
            concat.extend_from_slice(&self.subwords[m.right as usize]);
            if concat != self.subwords[m.merged as usize] {
                return Err(Error::Input(format!("merge {rank}: subword is not the concatenation of its parts")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            vocab: self
                .subwords
                .iter()
                .enumerate()
                .map(|(id, bytes)| (id as TokenId, B64.encode(bytes)))
                .collect(),
            merges: self.merges.iter().map(|m| [m.left, m.right, m.merged]).collect(),
            special: Specials {
                end_of_text: self.end_of_text,
            },
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::Input(format!("vocabulary JSON: {e}")))?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported vocabulary version {}", file.version)));
        }
        let mut subwords = vec![None; file.vocab.len()];
        for (id, encoded) in file.vocab {
            let slot = subwords
                .get_mut(id as usize)
                .ok_or_else(|| Error::Input(format!("vocabulary ids are not contiguous (found {id})")))?;
            if slot.is_some() {
                return Err(Error::Input(format!("duplicate vocabulary id {id}")));
            }
            let bytes = B64
                .decode(encoded)
                .map_err(|e| Error::Input(format!("id {id}: bad base64: {e}")))?;
            *slot = Some(bytes);
        }
        let subwords: Vec<Vec<u8>> = subwords.into_iter().map(|s| s.expect("all ids filled")).collect();
        let merges: Vec<Merge> = file
            .merges
            .iter()
            .map(|&[left, right, merged]| Merge { left, right, merged })
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, m)| ((m.left, m.right), (rank, m.merged)))
            .collect();
        let vocab = Self {
            subwords,
            merges,
            end_of_text: file.special.end_of_text,
            ranks,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    vocab: Vec<(TokenId, String)>,
    merges: Vec<[TokenId; 3]>,
    special: Specials,
}

#[derive(Serialize, Deserialize)]
struct Specials {
    end_of_text: TokenId,
}

/// Replaces non-overlapping occurrences of `(left, right)`, scanning left to right.
fn merge_pair(ids: &[TokenId], left: TokenId, right: TokenId, merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Learns up to `target_vocab_size - 257` merges from `corpus`.
///
/// Each round merges the most frequent adjacent pair; ties go to the
/// smaller left id, then the smaller right id. Learning stops early once no
/// pair occurs at least twice, so the result may be smaller than requested.
pub fn bpe_train(corpus: &[u8], target_vocab_size: usize) -> Result<(Vocabulary, CompressionStats)> {
    if target_vocab_size < MIN_VOCAB_SIZE {
        return Err(Error::Config(format!(
            "vocabulary size {target_vocab_size} is below the minimum {MIN_VOCAB_SIZE}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Input("cannot learn merges from an empty corpus".into()));
    }
    let mut vocab = Vocabulary::byte_level();
    let mut ids: Vec<TokenId> = corpus.iter().map(|&b| TokenId::from(b)).collect();
    let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();

    while vocab.len() < target_vocab_size {
        counts.clear();
        for w in ids.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
        let best = counts
            .iter()
            .filter(|&(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((&(left, right), _)) = best else {
            break;
        };
        let merged = vocab.push_merge(left, right);
        ids = merge_pair(&ids, left, right, merged);
    }

    let stats = CompressionStats {
        tokens_before: corpus.len(),
        tokens_after: ids.len(),
    };
    Ok((vocab, stats))
}

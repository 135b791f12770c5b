//! Checkpoint files.
//!
//! Layout: one line of UTF-8 JSON (the header), a `\n`, then every tensor's
//! values as little-endian IEEE-754 floats, row-major, in directory order.
//! The header carries the model configuration, the training step, the
//! SHA-256 of the paired vocabulary, the payload precision, and a directory
//! of `{name, shape, offset}` entries with byte offsets relative to the
//! start of the payload.
//!
//! Payloads are 64-bit by default. A 32-bit payload is marked with
//! `"dtype":"f32"` and widened on load.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::params::Parameters;
use crate::tokenizer::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: usize,
    pub params: Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: Precision,
    pub step: usize,
    pub vocab_hash: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        let width = self.dtype.width();
        self.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * width)
            .sum()
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, vocab: &Vocabulary, step: usize, params: Parameters) -> Self {
        Self {
            config,
            vocab_hash: vocab.content_hash(),
            step,
            params,
        }
    }

    fn header(&self, dtype: Precision) -> Header {
        let mut offset = 0;
        let tensors = Parameters::specs(&self.config)
            .into_iter()
            .map(|spec| {
                let entry = TensorEntry {
                    offset,
                    name: spec.name,
                    shape: spec.shape,
                };
                offset += entry.shape.iter().product::<usize>() * dtype.width();
                entry
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            dtype,
            step: self.step,
            vocab_hash: self.vocab_hash.clone(),
            config: self.config.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self, dtype: Precision) -> Result<Vec<u8>> {
        self.params.check_shapes(&self.config)?;
        if let Some(name) = self.params.first_non_finite() {
            return Err(CheckpointError::NonFinite(name).into());
        }
        let header = self.header(dtype);
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(header.payload_len());
        for (_, data) in self.params.tensors() {
            for &v in data {
                match dtype {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Parses and validates a checkpoint against the vocabulary it must be
    /// paired with.
    pub fn from_bytes(bytes: &[u8], expected_vocab: &Vocabulary) -> Result<Self> {
        let (header, payload) = split_header(bytes)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        check_directory(&header)?;

        let actual = expected_vocab.content_hash();
        if header.vocab_hash != actual {
            return Err(CheckpointError::VocabHash {
                stored: header.vocab_hash,
                actual,
            }
            .into());
        }
        let expected_len = header.payload_len();
        if payload.len() != expected_len {
            return Err(CheckpointError::Truncated {
                expected: expected_len,
                found: payload.len(),
            }
            .into());
        }

        let width = header.dtype.width();
        let tensors = header
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                let raw = &payload[t.offset..t.offset + n * width];
                let values = match header.dtype {
                    Precision::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                    Precision::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                        .collect(),
                };
                (t.name.clone(), values)
            })
            .collect();
        let params = Parameters::from_flat(&header.config, tensors)?;
        Ok(Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            step: header.step,
            params,
        })
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path, dtype: Precision) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path, expected_vocab: &Vocabulary) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_vocab)
    }
}

/// Reads only the JSON header of a checkpoint.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    split_header(bytes).map(|(h, _)| h)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("no header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &bytes[newline + 1..]))
}

fn check_directory(header: &Header) -> Result<()> {
    let specs = Parameters::specs(&header.config);
    if specs.len() != header.tensors.len() {
        return Err(CheckpointError::Shape(format!(
            "{} tensors listed, configuration implies {}",
            header.tensors.len(),
            specs.len()
        ))
        .into());
    }
    let mut offset = 0;
    for (spec, entry) in specs.iter().zip(&header.tensors) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(CheckpointError::Shape(format!(
                "expected {} {:?}, found {} {:?}",
                spec.name, spec.shape, entry.name, entry.shape
            ))
            .into());
        }
        if entry.offset != offset {
            return Err(CheckpointError::Shape(format!(
                "{} at offset {}, expected {offset}",
                entry.name, entry.offset
            ))
            .into());
        }
        offset += spec.numel() * header.dtype.width();
    }
    Ok(())
}

/// Writes `bytes` to a temp file beside `path`, then renames it into place
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{}.tmp", std::process::id()))
}

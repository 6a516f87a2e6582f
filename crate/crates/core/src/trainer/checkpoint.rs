//! Binary checkpoint layout:
//!
//! ```text
//! b"WALC" | version: u32 LE | header_len: u64 LE | header (JSON) | f32 LE data
//! ```
//!
//! The header holds the configs, tokenizer, training summary, corpus digest
//! and headword inventory, and lists every tensor's name, shape and byte offset into the data
//! section; tensors are stored in ascending name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LogSummary, TrainConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Array;
use crate::tokenizer::Tokenizer;

pub const MAGIC: &[u8; 4] = b"WALC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: need {needed} bytes, have {have}")]
    Truncated { needed: u64, have: u64 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams<f32>,
    pub log: LogSummary,
    /// Digest of the corpus splits the model was trained on.
    pub manifest_digest: String,
    /// Candidate inventory per language, so a checkpoint can rank on its own.
    pub headwords: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    tokenizer: Tokenizer,
    log: LogSummary,
    manifest_digest: String,
    #[serde(default)]
    headwords: BTreeMap<String, Vec<String>>,
    tensors: Vec<TensorEntry>,
}

fn take<'a>(bytes: &'a [u8], pos: usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    bytes.get(pos..pos.saturating_add(n)).ok_or(CheckpointError::Truncated {
        needed: (pos + n) as u64,
        have: bytes.len() as u64,
    })
}

impl Checkpoint {
    pub fn tensor_table(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.params
            .tensors()
            .iter()
            .map(|(name, a)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    offset,
                };
                offset += 4 * a.len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            tokenizer: self.tokenizer.clone(),
            log: self.log.clone(),
            manifest_digest: self.manifest_digest.clone(),
            headwords: self.headwords.clone(),
            tensors: self.tensor_table(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.n_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in self.params.tensors().values() {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let magic = take(bytes, 0, 4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().unwrap());
        let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated {
            needed: header_len,
            have: bytes.len() as u64,
        })?;
        let header: Header = serde_json::from_slice(take(bytes, 16, header_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let data_start = 16 + header_len;
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.offset != expected_offset {
                return Err(CheckpointError::Corrupt(format!("{}: offset {} out of order", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let raw = take(bytes, data_start + e.offset as usize, 4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array::from_vec(&e.shape, data).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
            if tensors.insert(e.name.clone(), arr).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {}", e.name)));
            }
            expected_offset += 4 * n as u64;
        }
        let end = data_start as u64 + expected_offset;
        if (bytes.len() as u64) > end {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() as u64 - end
            )));
        }
        let params = ModelParams::new(&header.model_config, tensors)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.tokenizer.vocab_size() != header.model_config.vocab_size {
            return Err(CheckpointError::Corrupt("tokenizer and model vocab sizes differ".into()));
        }
        Ok(Self {
            model_config: header.model_config,
            train_config: header.train_config,
            tokenizer: header.tokenizer,
            params,
            log: header.log,
            manifest_digest: header.manifest_digest,
            headwords: header.headwords,
        })
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

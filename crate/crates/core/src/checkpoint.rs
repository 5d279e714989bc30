//! Binary checkpoint format: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64` in
//! declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::Vocabulary;

pub const MAGIC: [u8; 8] = *b"VGCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: TrainConfig,
    vocab_hash: String,
    vocab_size: usize,
    best_epoch: Option<usize>,
    valid_acc: Option<f64>,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_hash: String,
    pub best_epoch: Option<usize>,
    pub valid_acc: Option<f64>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            vocab_size: self.params.vocab_size(),
            best_epoch: self.best_epoch,
            valid_acc: self.valid_acc,
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorInfo {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 16 || bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        let arch = header.config.architecture();
        let mut params = ModelParams::zeros(&arch, header.vocab_size);
        let expected: Vec<TensorInfo> = params
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor layout does not match the stored configuration"));
        }
        let mut data = &body[len..];
        if data.len() != params.num_scalars() * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of tensor data, found {}",
                params.num_scalars() * 8,
                data.len()
            )));
        }
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                let (head, rest) = data.split_at(8);
                *v = f64::from_le_bytes(head.try_into().expect("8 bytes"));
                data = rest;
            }
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab_hash: header.vocab_hash,
            best_epoch: header.best_epoch,
            valid_acc: header.valid_acc,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it was trained against `vocab`.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_vocab(vocab)?;
        Ok(ckpt)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.content_hash();
        if found != self.vocab_hash {
            return Err(Error::VocabHashMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        if vocab.len() != self.params.vocab_size() {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                self.params.vocab_size()
            )));
        }
        Ok(())
    }
}

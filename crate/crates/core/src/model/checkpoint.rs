//! Binary checkpoint: 8-byte magic, little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ModelError, TrainConfig};

const MAGIC: &[u8; 8] = b"BBOFCKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: usize,
    pub tokens_seen: u64,
    pub train: Option<TrainConfig>,
    /// SHA-256 of the tokenizer file the model was trained with.
    pub tokenizer_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    tokens_seen: u64,
    train: Option<TrainConfig>,
    tokenizer_sha256: Option<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Short content hash identifying a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self {
            model,
            step: 0,
            tokens_seen: 0,
            train: None,
            tokenizer_sha256: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            train: self.train.clone(),
            tokenizer_sha256: self.tokenizer_sha256.clone(),
            tensors: self
                .model
                .layout
                .tensors()
                .iter()
                .map(|(n, _, s)| (n.clone(), s.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.model.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fail = |m: &str| ModelError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_at = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body_at]).map_err(|e| fail(&e.to_string()))?;
        header.config.validate()?;
        let layout = header.config.layout();
        let expected: Vec<(String, Vec<usize>)> = layout
            .tensors()
            .iter()
            .map(|(n, _, s)| (n.clone(), s.clone()))
            .collect();
        if expected != header.tensors {
            return Err(fail("tensor table does not match the configuration"));
        }
        let body = &bytes[body_at..];
        if body.len() != 4 * layout.total {
            return Err(fail(&format!(
                "expected {} parameter bytes, found {}",
                4 * layout.total,
                body.len()
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            model: Model::from_params(header.config, params)?,
            step: header.step,
            tokens_seen: header.tokens_seen,
            train: header.train,
            tokenizer_sha256: header.tokenizer_sha256,
        })
    }
}

/// Write `ckpt` to `path` and return its id.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String, ModelError> {
    let bytes = ckpt.to_bytes();
    std::fs::write(path, &bytes)?;
    Ok(checkpoint_id(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), ModelError> {
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    Ok((ckpt, checkpoint_id(&bytes)))
}

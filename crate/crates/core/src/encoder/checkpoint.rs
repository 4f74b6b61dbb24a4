//! Checkpoint layout: the 8-byte magic `KAERCKPT`, a little-endian `u32`
//! header length, a JSON header (version, config, seed, vocabulary hash and
//! tensor list), then every tensor as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"KAERCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    seed: u64,
    vocab_hash: String,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub vocab_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            seed: self.params.config.seed,
            vocab_hash: self.vocab_hash.clone(),
            tensors: self
                .params
                .shapes()
                .into_iter()
                .map(|(name, shape)| TensorInfo { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.tensors() {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::IncompatibleArtifacts(format!("checkpoint: {msg}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut params = EncoderParams::init(&header.config)?;
        let expected = params.shapes();
        let declared: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if declared != expected {
            return Err(bad("tensor list does not match the config"));
        }
        let mut data = bytes[12 + hlen..].chunks_exact(8);
        if data.len() != params.num_params() || !data.remainder().is_empty() {
            return Err(bad("parameter data has the wrong length"));
        }
        for (_, t) in params.tensors_mut() {
            for (x, chunk) in t.iter_mut().zip(&mut data) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        Ok(Checkpoint {
            params,
            vocab_hash: header.vocab_hash,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

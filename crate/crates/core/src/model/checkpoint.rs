//! Self-describing binary checkpoint.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  b"FTXCKPT\0"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON: format_version, scalar, seed, config, params [{name, shape}], metadata
//! payload    every parameter in header order, each value as f64 LE
//! ```
//!
//! `f32` models are widened to `f64` on write, which is exact, so the round
//! trip is bit-exact for both scalar types.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FTimeXer, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FTXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    seed: u64,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scalar: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor<f64>)>,
    /// Free-form run metadata (normalizer, training settings).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            scalar: self.scalar.clone(),
            seed: self.seed,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.params.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + header_len;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload at `{}`", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push((entry.name, Tensor::new(entry.shape, data)?));
            cursor += 8 * n;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            scalar: header.scalar,
            seed: header.seed,
            config: header.config,
            params,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<S: Scalar> FTimeXer<S> {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            scalar: S::NAME.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| (name.to_string(), t.cast()))
                .collect(),
            metadata,
        }
    }

    /// Rebuilds the layout from the stored config and fills every parameter
    /// by name; names and shapes must match exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.scalar != S::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                ckpt.scalar,
                S::NAME
            )));
        }
        let mut model = Self::new(ckpt.config.clone(), ckpt.seed)?;
        if model.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        for (name, t) in &ckpt.params {
            model
                .params
                .set(name, t.cast())
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        Ok(model)
    }
}

//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, a JSON
//! header `{config, vocab, tensors: [{name, shape}]}`, then every tensor's
//! values as `f64` LE in header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GeoModel, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GEOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("bad checkpoint header")]
    Header(#[from] serde_json::Error),
    #[error("invalid config in checkpoint: {0}")]
    Config(String),
    #[error("checkpoint tensor {index}: expected {expected} {expected_shape:?}, found {found} {found_shape:?}")]
    Mismatch {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        found: String,
        found_shape: Vec<usize>,
    },
    #[error("checkpoint has {found} tensors, config implies {expected}")]
    Count { expected: usize, found: usize },
    #[error("checkpoint tensor {0} holds a non-finite value")]
    NonFinite(String),
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

impl GeoModel {
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in self.params.iter() {
            let mut buf = Vec::with_capacity(p.value.len() * 8);
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds the parameter skeleton from the stored config and rejects
    /// any tensor whose name or shape disagrees with it.
    pub fn read_checkpoint(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.config.validate().map_err(CheckpointError::Config)?;

        let mut index = HashMap::new();
        for (i, w) in header.vocab.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(CheckpointError::Config(format!("duplicate vocab word {w:?}")));
            }
        }
        let mut model = GeoModel::skeleton(header.config, header.vocab, index, 0);
        if model.params.len() != header.tensors.len() {
            return Err(CheckpointError::Count {
                expected: model.params.len(),
                found: header.tensors.len(),
            });
        }
        for (i, (p, meta)) in model.params.iter_mut().zip(&header.tensors).enumerate() {
            if p.name != meta.name || p.value.shape() != meta.shape.as_slice() {
                return Err(CheckpointError::Mismatch {
                    index: i,
                    expected: p.name.clone(),
                    expected_shape: p.value.shape().to_vec(),
                    found: meta.name.clone(),
                    found_shape: meta.shape.clone(),
                });
            }
            let mut bytes = vec![0u8; p.value.len() * 8];
            r.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(p.name.clone()));
            }
            p.value = Tensor::new(meta.shape.clone(), data).expect("shape checked");
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

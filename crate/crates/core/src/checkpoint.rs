//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DNMTCKPT`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's elements as little-endian
//! scalars, concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DNMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint dtype {found} does not match expected {expected}")]
    Dtype { expected: String, found: String },
    #[error("checkpoint tensor {name} has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor {0} is not a model parameter")]
    Unknown(String),
    #[error("model parameter {0} is missing from the checkpoint")]
    Missing(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub tensors: Vec<(String, Tensor<S>)>,
    pub meta: serde_json::Value,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_store(store: &ParamStore<S>) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: S::DTYPE.to_string(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * S::BYTES).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + header_len)
            .ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| CheckpointError::Format(format!("header json: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.dtype != S::DTYPE {
            return Err(CheckpointError::Dtype {
                expected: S::DTYPE.into(),
                found: header.dtype,
            });
        }
        let mut offset = 16 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let end = offset + len * S::BYTES;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| CheckpointError::Format(format!("truncated data for {}", entry.name)))?;
            let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((entry.name, t));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies tensors into `store` by name. Every checkpoint tensor must be a
    /// parameter of matching shape; with `require_all`, every parameter must
    /// also be present. Tensors whose names start with `skip_prefix` (e.g.
    /// optimizer state) are ignored.
    pub fn restore_into(
        &self,
        store: &mut ParamStore<S>,
        require_all: bool,
        skip_prefix: Option<&str>,
    ) -> Result<usize, CheckpointError> {
        let mut loaded = 0;
        for (name, t) in &self.tensors {
            if skip_prefix.is_some_and(|p| name.starts_with(p)) {
                continue;
            }
            let id = store
                .id(name)
                .ok_or_else(|| CheckpointError::Unknown(name.clone()))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(CheckpointError::Shape {
                    name: name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
            loaded += 1;
        }
        if require_all {
            if let Some((_, p)) = store.iter().find(|(_, p)| self.get(&p.name).is_none()) {
                return Err(CheckpointError::Missing(p.name.clone()));
            }
        }
        Ok(loaded)
    }
}

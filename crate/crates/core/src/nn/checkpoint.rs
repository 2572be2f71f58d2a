//! Checkpoint container: an 8-byte magic, a little-endian u64 manifest
//! length, a JSON manifest, then every tensor as little-endian raw values
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DUSCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub dtype: Dtype,
    /// Model configuration and any extra metadata, stored verbatim.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config_hash: &str, meta: serde_json::Value, store: &ParamStore, dtype: Dtype) -> Self {
        let tensors: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.grad = None;
                t
            })
            .collect();
        let entries = store
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: 1,
                kind: kind.to_string(),
                config_hash: config_hash.to_string(),
                dtype,
                meta,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let total: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + total * self.manifest.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for &v in t.data() {
                match self.manifest.dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let width = manifest.dtype.width();
        let mut pos = 16 + mlen;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| Error::Checkpoint(format!("truncated tensor `{}`", e.name)))?;
            let data = match manifest.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.push(Tensor::new(e.shape.clone(), data)?);
            pos += n * width;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies tensor values into a store built with the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for ((id, entry), t) in store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(&self.manifest.tensors)
            .zip(&self.tensors)
        {
            if store.name(id) != entry.name || store.tensor(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match model `{}` {:?}",
                    entry.name,
                    t.shape(),
                    store.name(id),
                    store.tensor(id).shape()
                )));
            }
            store.tensor_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

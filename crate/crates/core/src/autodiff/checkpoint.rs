//! `SOFA-CKPT-1` parameter checkpoints.
//!
//! Layout: the magic line `SOFA-CKPT-1\n`, a JSON manifest, a NUL byte, then
//! every tensor as little-endian `f64` values concatenated in manifest order.
//! Manifest offsets are byte offsets into that trailing blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "SOFA-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// What the parameters belong to, e.g. `classifier` or `generator`.
    pub kind: String,
    /// Model configuration and provenance.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(kind: &str, meta: serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.numel() * 8);
    for (name, p) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { kind: kind.to_string(), meta, tensors };
    let mut out = Vec::with_capacity(blob.len() + 1024);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&serde_json::to_vec(&manifest)?);
    out.push(0);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointManifest, ParamStore)> {
    let magic = format!("{CHECKPOINT_MAGIC}\n");
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .ok_or(Error::BadMagic { expected: CHECKPOINT_MAGIC })?;
    let nul = rest
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::Inconsistent("manifest is not NUL-terminated".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&rest[..nul])?;
    let blob = &rest[nul + 1..];

    let mut store = ParamStore::new();
    let mut cursor = 0usize;
    for entry in &manifest.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Inconsistent(format!("unsupported dtype `{}` for `{}`", entry.dtype, entry.name)));
        }
        if entry.offset != cursor {
            return Err(Error::Inconsistent(format!("offset of `{}` is {}, expected {cursor}", entry.name, entry.offset)));
        }
        let numel: usize = entry.shape.iter().product();
        let end = cursor + numel * 8;
        if end > blob.len() {
            return Err(Error::Truncated { expected: end, found: blob.len() });
        }
        let data = blob[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        cursor = end;
    }
    if cursor != blob.len() {
        return Err(Error::Inconsistent(format!("{} trailing bytes after last tensor", blob.len() - cursor)));
    }
    Ok((manifest, store))
}

pub fn save_checkpoint(path: &Path, kind: &str, meta: serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(kind, meta, store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Single-file container of named `f64` arrays.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, the manifest as
//! JSON, then every tensor's values as little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamStore, Tensor};
use crate::error::{EdkError, Result};

const MAGIC: &[u8; 8] = b"EDKCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Hex SHA-256 of the little-endian bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `knowledge_base` or `model`.
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn tensor_digest(t: &Tensor) -> String {
    hex::encode(Sha256::digest(le_bytes(t)))
}

/// Hash over names, shapes and values of every parameter in store order.
pub fn store_digest(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        h.update(le_bytes(t));
    }
    hex::encode(h.finalize())
}

pub fn write_checkpoint(
    w: &mut impl Write,
    kind: &str,
    metadata: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let manifest = Manifest {
        kind: kind.to_string(),
        metadata,
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                sha256: tensor_digest(t),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in store.iter() {
        w.write_all(&le_bytes(t))?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    metadata: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, kind, metadata, store)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads and verifies a container; tensors come back in manifest order.
pub fn read_checkpoint(r: &mut impl Read) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bad = |m: &str| EdkError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| bad(&format!("bad manifest: {e}")))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(&format!("truncated data for {}", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data);
        if tensor_digest(&t) != entry.sha256 {
            return Err(bad(&format!("checksum mismatch for {}", entry.name)));
        }
        tensors.push((entry.name.clone(), t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((manifest, tensors))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Copies loaded tensors into a freshly built store, requiring an exact name and shape match.
pub fn restore_into(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(EdkError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| EdkError::Checkpoint(format!("unexpected tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(EdkError::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, t);
    }
    Ok(())
}

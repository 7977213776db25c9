//! Checkpoint files.
//!
//! Layout: 8-byte magic `MSTCNCK1`, 4-byte big-endian manifest length, UTF-8
//! JSON manifest, then the blob of little-endian `f32` parameter values.
//! Manifest offsets are byte offsets into the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_model, ModelConfig, MsTcnNet};

pub const MAGIC: &[u8; 8] = b"MSTCNCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(net: &MsTcnNet, seed: u64, epoch: usize) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(net.num_parameters() * 4);
    for (name, p) in net.param_names().into_iter().zip(net.params()) {
        tensors.push(TensorEntry {
            name,
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            len: p.numel(),
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: net.config.clone(),
        seed,
        epoch,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses and validates the manifest before touching the blob.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MsTcnNet, Manifest), CheckpointError> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("header shorter than 12 bytes".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mlen = u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < mlen {
        return Err(CheckpointError::Truncated(format!("manifest needs {mlen} bytes, {} present", body.len())));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut net = build_model(&manifest.config, 0).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let names = net.param_names();
    if manifest.tensors.len() != names.len() {
        return Err(CheckpointError::Shape(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    let mut expected_blob = 0;
    let mut entries = Vec::with_capacity(names.len());
    for (name, p) in names.iter().zip(net.params()) {
        let mut matching = manifest.tensors.iter().filter(|t| &t.name == name);
        let entry = matching
            .next()
            .ok_or_else(|| CheckpointError::Shape(format!("tensor {name} missing from manifest")))?;
        if matching.next().is_some() {
            return Err(CheckpointError::Shape(format!("tensor {name} listed twice")));
        }
        if entry.shape != p.value.shape() || entry.len != p.numel() {
            return Err(CheckpointError::Shape(format!(
                "tensor {name}: manifest shape {:?}, model shape {:?}",
                entry.shape,
                p.value.shape()
            )));
        }
        expected_blob += entry.len * 4;
        entries.push(entry.clone());
    }
    let blob = &body[mlen..];
    if blob.len() < expected_blob {
        return Err(CheckpointError::Truncated(format!(
            "blob has {} bytes, manifest needs {expected_blob}",
            blob.len()
        )));
    }
    if blob.len() > expected_blob {
        return Err(CheckpointError::Shape(format!(
            "blob has {} trailing bytes",
            blob.len() - expected_blob
        )));
    }
    for (entry, p) in entries.iter().zip(net.params_mut()) {
        let end = entry.offset + entry.len * 4;
        if end > blob.len() {
            return Err(CheckpointError::Truncated(format!("tensor {} runs past the blob", entry.name)));
        }
        for (v, chunk) in p.value.data_mut().iter_mut().zip(blob[entry.offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok((net, manifest))
}

pub fn save_checkpoint(net: &MsTcnNet, seed: u64, epoch: usize, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, seed, epoch)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(MsTcnNet, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

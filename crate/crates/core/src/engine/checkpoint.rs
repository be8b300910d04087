//! Single-file checkpoints: magic, manifest length, JSON manifest, then every
//! parameter and buffer as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MTREECK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fingerprint: String,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub best_epoch: usize,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    /// Hex SHA-256 of the array payload.
    pub payload_sha256: String,
}

fn entries(store: &ParamStore<f32>) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

pub fn to_bytes(m: &TrainedModel) -> Vec<u8> {
    let mut payload = Vec::with_capacity(4 * (m.model.params.numel() + m.model.buffers.numel()));
    for t in m.model.params.iter().chain(m.model.buffers.iter()) {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        fingerprint: m.fingerprint(),
        config: m.config.clone(),
        architecture: *m.model.net.architecture(),
        best_epoch: m.best_epoch,
        params: entries(&m.model.params),
        buffers: entries(&m.model.buffers),
        payload_sha256: format!("{:x}", Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn fill(store: &mut ParamStore<f32>, expected: &[TensorEntry], payload: &mut &[u8]) -> Result<()> {
    let layout = entries(store);
    if layout != expected {
        return Err(Error::Checkpoint("tensor layout does not match the architecture".into()));
    }
    for t in store.iter_mut() {
        let n = t.data.len() * 4;
        if payload.len() < n {
            return Err(Error::Checkpoint(format!("payload truncated in {}", t.name)));
        }
        let (head, rest) = payload.split_at(n);
        for (v, b) in t.data.iter_mut().zip(head.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        *payload = rest;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing magic header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Checkpoint("manifest truncated".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut payload = &bytes[16 + len..];
    if format!("{:x}", Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    if manifest.config.fingerprint() != manifest.fingerprint {
        return Err(Error::Checkpoint("config fingerprint mismatch".into()));
    }
    let mut model = Model::<f32>::new(manifest.architecture, manifest.config.seed)?;
    fill(&mut model.params, &manifest.params, &mut payload)?;
    fill(&mut model.buffers, &manifest.buffers, &mut payload)?;
    if !payload.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(TrainedModel {
        model,
        config: manifest.config,
        best_epoch: manifest.best_epoch,
    })
}

pub fn save(m: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

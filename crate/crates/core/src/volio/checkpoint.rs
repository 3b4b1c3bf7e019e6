//! Checkpoints: a `<stem>.json` manifest describing named tensors by byte
//! range plus a `<stem>.bin` blob of concatenated f32le payloads. The
//! manifest carries the training config and its hash so a resumed run can
//! refuse weights produced under different settings.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::regnet::NetworkConfig;
use crate::tensor::Value;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub seed: u64,
    pub config: NetworkConfig,
    pub config_hash: String,
}

impl CheckpointMeta {
    pub fn new(iteration: u64, seed: u64, config: NetworkConfig) -> Self {
        let config_hash = config_hash(&config);
        CheckpointMeta { iteration, seed, config, config_hash }
    }
}

fn config_hash(config: &NetworkConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Write `<stem>.json` and `<stem>.bin`; byte-deterministic per input.
pub fn checkpoint_save(
    stem: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, Value<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, value) in tensors {
        let offset = blob.len();
        for v in value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: value.dims().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest { meta: meta.clone(), tensors: entries };
    let json = serde_json::to_string(&manifest)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    fs::write(stem.with_extension("json"), json)?;
    fs::write(stem.with_extension("bin"), blob)?;
    Ok(())
}

/// Read a checkpoint back, verifying the config hash, tensor name uniqueness,
/// byte ranges, and payload finiteness.
pub fn checkpoint_load(stem: &Path) -> Result<(CheckpointMeta, Vec<(String, Value<f32>)>)> {
    let manifest_path = stem.with_extension("json");
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| super::format::read_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json).map_err(|e| {
        Error::data(format!("malformed manifest {:?}: {e}", stem.with_extension("json")))
    })?;

    let expected = config_hash(&manifest.meta.config);
    if manifest.meta.config_hash != expected {
        return Err(Error::data(format!(
            "config hash {} does not match the stored config (expected {expected})",
            manifest.meta.config_hash
        )));
    }

    let mut seen = HashSet::new();
    let mut cursor = 0usize;
    for entry in &manifest.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::data(format!("duplicate tensor name {:?}", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.length != 4 * numel {
            return Err(Error::data(format!(
                "tensor {:?} shape {:?} implies {} bytes, manifest says {}",
                entry.name,
                entry.shape,
                4 * numel,
                entry.length
            )));
        }
        if entry.offset != cursor {
            return Err(Error::data(format!(
                "tensor {:?} starts at byte {}, expected {cursor}",
                entry.name, entry.offset
            )));
        }
        cursor += entry.length;
    }

    let blob_path = stem.with_extension("bin");
    let blob = fs::read(&blob_path).map_err(|e| super::format::read_err(&blob_path, e))?;
    if blob.len() != cursor {
        return Err(Error::data(format!(
            "blob is {} bytes, manifest implies {cursor} bytes",
            blob.len()
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let bytes = &blob[entry.offset..entry.offset + entry.length];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!(
                "tensor {:?} contains non-finite values",
                entry.name
            )));
        }
        let value = Value::new(entry.shape.clone(), data)?;
        tensors.push((entry.name.clone(), value));
    }
    Ok((manifest.meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_for_equal_configs() {
        let a = config_hash(&NetworkConfig::default());
        let b = config_hash(&NetworkConfig::default());
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn meta_carries_the_hash_of_its_own_config() {
        let meta = CheckpointMeta::new(0, 0, NetworkConfig::default());
        assert_eq!(meta.config_hash, config_hash(&meta.config));
    }
}

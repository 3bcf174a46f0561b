//! Checkpoint directory: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds little-endian `f32` values concatenated in manifest
//! order: every learned tensor, then each normalization layer's running mean
//! and variance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest and weight bytes for `model`, without touching the filesystem.
pub fn encode_checkpoint(model: &Model<f32>) -> (CheckpointManifest, Vec<u8>) {
    let store = model.params();
    let mut entries = Vec::new();
    let mut bytes = Vec::with_capacity(4 * store.num_scalars());
    let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
        let offset = bytes.len();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            len: bytes.len() - offset,
        });
    };
    for (name, t) in store.names().iter().zip(store.tensors()) {
        push(name.clone(), t.shape().to_vec(), t.data());
    }
    for (name, s) in store.stats_names().iter().zip(store.stats()) {
        push(format!("{name}{RUNNING_MEAN}"), vec![s.channels()], &s.mean);
        push(format!("{name}{RUNNING_VAR}"), vec![s.channels()], &s.var);
    }
    (
        CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            tensors: entries,
        },
        bytes,
    )
}

/// Rebuild a model from a manifest and its weight bytes.
pub fn decode_checkpoint(manifest: &CheckpointManifest, bytes: &[u8]) -> Result<Model<f32>> {
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut model = Model::<f32>::new(&manifest.config, 0)?;
    let read = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let e = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let numel: usize = e.shape.iter().product();
        if e.len != 4 * numel || e.offset + e.len > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: {} bytes at offset {} do not fit shape {:?} in a {}-byte file",
                e.len,
                e.offset,
                e.shape,
                bytes.len()
            )));
        }
        let values = bytes[e.offset..e.offset + e.len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.shape.clone(), values))
    };
    let store = model.params();
    let expected = store.len() + 2 * store.stats().len();
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors listed, the configured model has {expected}",
            manifest.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(store.len());
    for name in store.names() {
        let (shape, values) = read(name)?;
        tensors.push(Tensor::new(shape, values)?);
    }
    let mut stats = Vec::with_capacity(store.stats().len());
    for name in store.stats_names() {
        let (_, mean) = read(&format!("{name}{RUNNING_MEAN}"))?;
        let (_, var) = read(&format!("{name}{RUNNING_VAR}"))?;
        stats.push(RunningStats { mean, var });
    }
    model.params_mut().load(tensors, stats)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, bytes) = encode_checkpoint(model);
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read {WEIGHTS_FILE}: {e}")))?;
    decode_checkpoint(&manifest, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::{AttentionMode, Placement};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::desk().with_attention(AttentionMode::Box, Placement::First);
        let mut model = Model::<f32>::new(&cfg, 3).unwrap();
        model.params_mut().stats_mut()[0].mean[0] = 0.123;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        let (_, a) = encode_checkpoint(&model);
        let (_, b) = encode_checkpoint(&back);
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_weights_rejected() {
        let model = Model::<f32>::new(&ModelConfig::desk(), 1).unwrap();
        let (manifest, mut bytes) = encode_checkpoint(&model);
        bytes.truncate(bytes.len() - 4);
        assert!(decode_checkpoint(&manifest, &bytes).is_err());
        let mut m2 = manifest.clone();
        m2.format_version = 9;
        assert!(matches!(
            decode_checkpoint(&m2, &bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}

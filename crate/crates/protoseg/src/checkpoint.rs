//! Model persistence: a diffable JSON manifest next to a flat binary payload.
//!
//! `save_checkpoint("model.ckpt", ...)` writes two files: `model.ckpt` holds
//! every parameter value as little-endian 32-bit floats concatenated in
//! serialization order, and `model.ckpt.json` holds the manifest (format
//! version, architecture hyperparameters, the block names and shapes the
//! payload is split by, plus training provenance). Loading validates the
//! manifest against the architecture it implies and the payload against the
//! manifest, so a truncated or mismatched pair fails loudly instead of
//! producing a silently wrong model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numerics::tensor::Tensor;
use crate::refine::{param_layout, Model, ModelConfig};
use crate::{Error, Result};

/// Current manifest format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter block and its tensor shape.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The JSON sidecar describing a checkpoint payload.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub z: usize,
    pub d: usize,
    pub alpha: f64,
    /// Blocks in payload order; the payload is their concatenation.
    pub blocks: Vec<BlockInfo>,
    /// Seed the model was initialized/trained with.
    pub seed: u64,
    pub epochs_trained: usize,
}

impl Manifest {
    /// Total number of scalar parameters across all blocks.
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum()
    }
}

/// Path of the JSON manifest that accompanies `payload_path`.
pub fn manifest_path(payload_path: &Path) -> PathBuf {
    let mut os = payload_path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn expected_blocks(config: ModelConfig) -> Vec<BlockInfo> {
    param_layout(&config)
        .into_iter()
        .map(|(name, shape)| BlockInfo { name, shape })
        .collect()
}

/// Writes the payload at `path` and the manifest at `path` + `.json`.
pub fn save_checkpoint(
    model: &Model<f32>,
    seed: u64,
    epochs_trained: usize,
    path: &Path,
) -> Result<()> {
    model.validate()?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        z: model.config.z,
        d: model.config.d,
        alpha: model.config.alpha,
        blocks: expected_blocks(model.config),
        seed,
        epochs_trained,
    };
    let mut payload = Vec::with_capacity(manifest.param_count() * 4);
    for tensor in model.params() {
        for v in tensor.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &payload)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    fs::write(manifest_path(path), json)?;
    Ok(())
}

/// Reads and validates the manifest at `path` + `.json`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| {
        Error::Checkpoint(format!("cannot read manifest {}: {e}", mpath.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed manifest {}: {e}", mpath.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let config = ModelConfig { z: manifest.z, d: manifest.d, alpha: manifest.alpha, ..ModelConfig::default() };
    let expected = expected_blocks(config);
    if manifest.blocks != expected {
        return Err(Error::Checkpoint(format!(
            "manifest blocks do not match a z={}, d={} architecture",
            manifest.z, manifest.d
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint pair back into a model.
///
/// The returned model uses default iteration/seeding knobs (`t_train`,
/// `t_infer`, initial-mask mode); callers override them as needed — they are
/// runtime choices, not part of the persisted architecture.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Manifest)> {
    let manifest = load_manifest(path)?;
    let payload = fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read payload {}: {e}", path.display()))
    })?;
    let expected_bytes = manifest.param_count() * 4;
    if payload.len() != expected_bytes {
        return Err(Error::Checkpoint(format!(
            "payload {} has {} bytes, manifest implies {expected_bytes}",
            path.display(),
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.blocks.len());
    let mut offset = 0usize;
    for block in &manifest.blocks {
        let numel: usize = block.shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let bytes: [u8; 4] = payload[offset..offset + 4].try_into().expect("bounds checked");
            values.push(f32::from_le_bytes(bytes));
            offset += 4;
        }
        tensors.push(Tensor::new(block.shape.clone(), values)?);
    }
    let config = ModelConfig { z: manifest.z, d: manifest.d, alpha: manifest.alpha, ..ModelConfig::default() };
    let model = Model::from_params(config, tensors)?;
    Ok((model, manifest))
}

//! Checkpoint serialization.
//!
//! A checkpoint is a directory holding a JSON manifest plus a single raw
//! weight blob:
//!
//! ```text
//! <dir>/
//!   checkpoint.json   manifest: format tag, step, model config, tensor table
//!   weights.bin       every parameter as little-endian f32, concatenated in
//!                     manifest order
//! ```
//!
//! The manifest's tensor table pins name, shape, and element offset for each
//! parameter, so a loader can verify the blob layout instead of trusting it.
//! Loading rebuilds the model from the embedded config and overwrites its
//! weights, which round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// Format tag stored in the manifest; bump on layout changes.
pub const CHECKPOINT_FORMAT: &str = "SEGCKPT1";
/// Manifest file name inside a checkpoint directory.
pub const MANIFEST_FILE: &str = "checkpoint.json";
/// Weight blob file name inside a checkpoint directory.
pub const WEIGHTS_FILE: &str = "weights.bin";

/// One parameter's slot in the weight blob. `offset` and `len` are in f32
/// elements, not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: usize,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Write `model` (and the training step that produced it) into `dir`,
/// creating the directory if needed. Overwrites any previous checkpoint
/// there.
pub fn save_checkpoint(dir: &Path, model: &Model, step: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.named_params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &params {
        let data = t.data();
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: data.len(),
        });
        offset += data.len();
        blob.reserve(data.len() * 4);
        for v in &data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        step,
        config: model.config.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// Read a checkpoint directory back into a freshly built model, returning the
/// model and the stored step. Every structural mismatch between manifest,
/// blob, and rebuilt model is a `Format` error.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, usize)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| format_err(format!("unparseable manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(format_err(format!(
            "format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() != total * 4 {
        return Err(format_err(format!(
            "weight blob holds {} bytes, manifest declares {} elements",
            blob.len(),
            total
        )));
    }

    let model = Model::new(manifest.config.clone(), 0)?;
    let params = model.named_params();
    if params.len() != manifest.tensors.len() {
        return Err(format_err(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut offset = 0usize;
    for ((name, p), entry) in params.iter().zip(&manifest.tensors) {
        if *name != entry.name {
            return Err(format_err(format!(
                "tensor order mismatch: manifest {:?}, model {:?}",
                entry.name, name
            )));
        }
        if p.shape() != entry.shape.as_slice() || p.numel() != entry.len {
            return Err(format_err(format!(
                "tensor {:?} has shape {:?}, manifest declares {:?} ({} elements)",
                name,
                p.shape(),
                entry.shape,
                entry.len
            )));
        }
        if entry.offset != offset {
            return Err(format_err(format!(
                "tensor {:?} at offset {}, expected contiguous {}",
                name, entry.offset, offset
            )));
        }
        let bytes = &blob[offset * 4..(offset + entry.len) * 4];
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        p.set_data(&vals);
        offset += entry.len;
    }
    Ok((model, manifest.step))
}

fn format_err(msg: String) -> Error {
    Error::Format(format!("checkpoint: {msg}"))
}

//! Checkpoint I/O for the attention denoiser.
//!
//! Checkpoints are a self-describing JSON manifest (config + named tensors).
//! Finite `f64` values survive the JSON round trip bit-exactly (shortest
//! round-trip decimal encoding), so save/load is lossless; non-finite
//! parameters are rejected at save time.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::denoiser::attention::{AttentionDenoiser, AttentionDenoiserConfig, ParamStore};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: AttentionDenoiserConfig,
    /// Training epoch the checkpoint was taken at (0 = initialization).
    epoch: usize,
    params: Vec<TensorEntry>,
    /// Flat AdamW first/second moment estimates plus step count, when the
    /// checkpoint is resumable.
    optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A saved model plus optional training state.
pub struct Checkpoint {
    pub model: AttentionDenoiser,
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &AttentionDenoiser,
    epoch: usize,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        if !t.is_finite() {
            return Err(Error::Config(format!("refusing to save non-finite parameter {name}")));
        }
        params.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            data: t.data.clone(),
        });
    }
    let manifest = Manifest {
        format: "attention-denoiser/1".into(),
        config: model.config.clone(),
        epoch,
        params,
        optimizer: optimizer.cloned(),
    };
    let json = serde_json::to_string(&manifest)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != "attention-denoiser/1" {
        return Err(Error::Config(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    // Rebuild with the saved config, then overwrite every tensor.
    let mut model = AttentionDenoiser::new(manifest.config, 0)?;
    if manifest.params.len() != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, config implies {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for entry in manifest.params {
        let slot = checked_slot(&mut model.params, &entry)?;
        *slot = Tensor::from_vec(entry.rows, entry.cols, entry.data);
    }
    Ok(Checkpoint { model, epoch: manifest.epoch, optimizer: manifest.optimizer })
}

fn checked_slot<'a>(params: &'a mut ParamStore, entry: &TensorEntry) -> Result<&'a mut Tensor> {
    if !params.names().iter().any(|n| n == &entry.name) {
        return Err(Error::Config(format!("unknown parameter {:?} in checkpoint", entry.name)));
    }
    let t = params.get_mut(&entry.name);
    if t.rows != entry.rows || t.cols != entry.cols {
        return Err(Error::Config(format!(
            "parameter {:?} has shape {}x{}, checkpoint says {}x{}",
            entry.name, t.rows, t.cols, entry.rows, entry.cols
        )));
    }
    if entry.data.len() != entry.rows * entry.cols {
        return Err(Error::Config(format!("parameter {:?} has wrong element count", entry.name)));
    }
    Ok(t)
}

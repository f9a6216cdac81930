//! Checkpoints: a JSON manifest plus one concatenated little-endian f32
//! blob for parameters (and optionally another for optimizer moments).
//!
//! Layout under the checkpoint directory:
//!   manifest.json  - format version, model config, training state, and
//!                    per-tensor (name, shape, offset, len) entries
//!   params.bin     - concatenated f32 parameter data
//!   optim.bin      - Adam moments, present when the manifest says so

use crate::blob;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::VisitParams;
use crate::tensor::Tensor;
use crate::train::AdamW;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub model: ModelConfig,
    pub step: usize,
    pub stage: usize,
    pub has_optimizer: bool,
    pub optimizer_step: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub optimizer_tensors: Vec<TensorEntry>,
}

fn pack(tensors: &[(String, &Tensor<f32>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob_bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob_bytes.len(),
            len: t.numel(),
        });
        blob_bytes.extend_from_slice(&blob::f32s_to_le_bytes(t.data()));
    }
    (entries, blob_bytes)
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    optimizer: Option<&AdamW<f32>>,
    step: usize,
    stage: usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    // visit gives references we cannot hold across the closure; collect
    // owned names first, then re-borrow in order
    let owned = crate::params::named_tensors(params);
    let refs: Vec<(String, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    named.extend(refs);

    let (tensors, params_blob) = pack(&named);
    blob::atomic_write(&dir.join("params.bin"), &params_blob)?;

    let (optimizer_tensors, optimizer_step) = match optimizer {
        Some(opt) => {
            let state = opt.named_state();
            let (entries, bytes) = pack(&state);
            blob::atomic_write(&dir.join("optim.bin"), &bytes)?;
            (entries, opt.step_count)
        }
        None => (Vec::new(), 0),
    };

    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION.into(),
        model: params.cfg.clone(),
        step,
        stage,
        has_optimizer: optimizer.is_some(),
        optimizer_step,
        tensors,
        optimizer_tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(dir.display().to_string(), e.to_string()))?;
    blob::atomic_write(&dir.join("manifest.json"), json.as_bytes())
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(mpath.display().to_string(), format!("bad manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            mpath.display().to_string(),
            format!(
                "unsupported checkpoint version '{}' (expected '{CHECKPOINT_VERSION}')",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

fn unpack(dir: &Path, file: &str, entries: &[TensorEntry]) -> Result<HashMap<String, Tensor<f32>>> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = HashMap::with_capacity(entries.len());
    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.len {
            return Err(Error::format(
                path.display().to_string(),
                format!("tensor '{}' shape {:?} disagrees with len {}", e.name, e.shape, e.len),
            ));
        }
        let end = e.offset + e.len * 4;
        if end > bytes.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "tensor '{}' expects bytes [{}, {end}) but blob has {}",
                    e.name,
                    e.offset,
                    bytes.len()
                ),
            ));
        }
        spans.push((e.offset, end, &e.name));
        let data = blob::le_bytes_to_f32s(&bytes[e.offset..end]);
        if out
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::format(
                path.display().to_string(),
                format!("tensor '{}' listed twice", e.name),
            ));
        }
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::format(
                path.display().to_string(),
                format!("tensors '{}' and '{}' overlap in the blob", w[0].2, w[1].2),
            ));
        }
    }
    Ok(out)
}

/// Load parameter tensors into an existing model. Every model parameter
/// must be present with a matching shape; extra manifest names are errors.
pub fn load_checkpoint_into(params: &mut ModelParams<f32>, dir: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    let mut loaded = unpack(dir, "params.bin", &manifest.tensors)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    params.visit_mut("", &mut |name, t| match loaded.remove(name) {
        Some(new) => {
            if new.shape() == t.shape() {
                *t = new;
            } else {
                mismatched.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    new.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(name.to_string()),
    });
    let mut problems = Vec::new();
    if !mismatched.is_empty() {
        problems.push(format!("shape mismatch for {}", mismatched.join("; ")));
    }
    if !missing.is_empty() {
        problems.push(format!(
            "manifest is missing model tensors: {}",
            missing.join(", ")
        ));
    }
    if !loaded.is_empty() {
        let mut names: Vec<String> = loaded.into_keys().collect();
        names.sort();
        problems.push(format!(
            "unknown tensor names in manifest: {}",
            names.join(", ")
        ));
    }
    if !problems.is_empty() {
        return Err(Error::format(
            dir.display().to_string(),
            problems.join("; "),
        ));
    }
    Ok(manifest)
}

/// Load a checkpoint using the model config embedded in its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut params: ModelParams<f32> = ModelParams::init(manifest.model.clone())?;
    let manifest = load_checkpoint_into(&mut params, dir)?;
    Ok((params, manifest))
}

/// Restore optimizer moments recorded alongside a checkpoint.
pub fn load_optimizer_state(
    optimizer: &mut AdamW<f32>,
    manifest: &CheckpointManifest,
    dir: &Path,
) -> Result<()> {
    if !manifest.has_optimizer {
        return Err(Error::Contract(format!(
            "checkpoint at {} carries no optimizer state",
            dir.display()
        )));
    }
    let state = unpack(dir, "optim.bin", &manifest.optimizer_tensors)?;
    optimizer.load_state(&state, manifest.optimizer_step)
}

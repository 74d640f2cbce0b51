//! Checkpoint directories: one `DSD1` file per parameter plus
//! `manifest.json` describing names, files, shapes and stages.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DinoSd, ModelConfig, ParamGroup};
use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::io::dsd1;
use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "dino-sd-checkpoint";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub stage: String,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Attention mode the weights were trained with.
    pub attention: Option<AttentionMode>,
    pub epoch: Option<usize>,
    pub tensors: Vec<ManifestEntry>,
}

/// Writes `model` into `dir` (created if needed). Values are stored as f32.
pub fn save_checkpoint<T: Real>(
    dir: impl AsRef<Path>,
    model: &DinoSd<T>,
    attention: Option<AttentionMode>,
    epoch: Option<usize>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for e in model.params().entries() {
        let file = format!("{}.dsd1", e.name);
        dsd1::write(dir.join(&file), &e.value)?;
        tensors.push(ManifestEntry {
            name: e.name.clone(),
            file,
            shape: e.value.shape().to_vec(),
            stage: e.stage.clone(),
            group: e.group,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        attention,
        epoch,
        tensors,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.format != FORMAT {
        return Err(Error::format(&path, format!("unexpected format tag {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save_checkpoint`].
///
/// Every parameter of the configured architecture must be present exactly
/// once with a matching shape.
pub fn load_checkpoint<T: Real>(dir: impl AsRef<Path>) -> Result<(DinoSd<T>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST);
    let mut model = DinoSd::<T>::new(manifest.config.clone(), 0)?;
    let mut listed: HashMap<&str, &ManifestEntry> = HashMap::new();
    for entry in &manifest.tensors {
        if listed.insert(entry.name.as_str(), entry).is_some() {
            return Err(Error::format(&manifest_path, format!("duplicate tensor {}", entry.name)));
        }
    }
    if listed.len() != model.params().len() {
        return Err(Error::format(
            &manifest_path,
            format!("manifest lists {} tensors, architecture has {}", listed.len(), model.params().len()),
        ));
    }
    let names: Vec<String> = model.params().entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let entry = listed
            .get(name.as_str())
            .ok_or_else(|| Error::format(&manifest_path, format!("missing tensor {name}")))?;
        if entry.file.contains('/') || entry.file.contains("..") {
            return Err(Error::format(&manifest_path, format!("suspicious file name {}", entry.file)));
        }
        let path = dir.join(&entry.file);
        let value = dsd1::read::<T>(&path)?;
        if value.shape() != entry.shape.as_slice() {
            return Err(Error::format(&path, format!("shape {:?} disagrees with manifest {:?}", value.shape(), entry.shape)));
        }
        model.params_mut().set(&name, value).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok((model, manifest))
}

//! Checkpoint directories: a `manifest.json` plus one tensor file per
//! named parameter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{hex, ParamStore};
use crate::tensor_file::{load_tensor, save_tensor, TensorFile};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Fusion,
    Predictor,
    Detector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model_kind: ModelKind,
    /// Parameter name to file path relative to the checkpoint directory.
    pub named_tensors: BTreeMap<String, String>,
    pub config_snapshot: serde_json::Value,
    pub created_at: String,
    pub format_version: u32,
}

impl CheckpointManifest {
    /// SHA-256 of the canonical config snapshot, used for provenance.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config_snapshot)
    }
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value serializes");
    hex(&Sha256::digest(&bytes))
}

fn file_name_for(name: &str) -> String {
    let clean: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
    format!("{clean}.sdgt")
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model_kind: ModelKind,
    params: &ParamStore,
    config_snapshot: serde_json::Value,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named_tensors = BTreeMap::new();
    let mut used = BTreeSet::new();
    for (name, tensor) in params.to_tensor_files()? {
        let mut file = file_name_for(&name);
        if !used.insert(file.clone()) {
            file = format!("{}_{}.sdgt", file.trim_end_matches(".sdgt"), used.len());
            used.insert(file.clone());
        }
        save_tensor(dir.join(&file), &tensor)?;
        named_tensors.insert(name, file);
    }
    let manifest = CheckpointManifest {
        model_kind,
        named_tensors,
        config_snapshot,
        created_at: chrono::Utc::now().to_rfc3339(),
        format_version: FORMAT_VERSION,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok(manifest)
}

/// Loads a checkpoint given its directory or manifest path.
pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType) -> Result<(CheckpointManifest, ParamStore)> {
    let path = path.as_ref();
    let dir = if path.is_dir() { path } else { path.parent().unwrap_or(Path::new(".")) };
    let manifest = read_manifest(path)?;
    let mut files = BTreeMap::new();
    for (name, rel) in &manifest.named_tensors {
        let file = dir.join(rel);
        if !file.exists() {
            return Err(Error::Format(format!("missing tensor file for `{name}`: {}", file.display())));
        }
        let tensor: TensorFile = load_tensor(&file)?;
        files.insert(name.clone(), tensor);
    }
    Ok((manifest.clone(), ParamStore::from_tensor_files(files, dtype)?))
}

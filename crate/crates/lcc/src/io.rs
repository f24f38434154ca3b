//! File helpers: JSON documents, binary files, context files.

use crate::error::{LccError, Result};
use crate::format;
use lcc_core::data::{Fact, SyntheticContext};
use lcc_core::lora::LoraAdapter;
use lcc_core::model::{Fingerprint, ModelWeights};
use lcc_core::BufferArtifact;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LccError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LccError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LccError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| LccError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline. Field order follows the types, so
/// equal values always produce equal bytes.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &to_json(value))
}

/// A context on disk. Facts are kept so probes can be built without
/// re-running the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextFile {
    pub seed: u64,
    pub tokens: Vec<u32>,
    /// `[key, value]` token pairs.
    pub facts: Vec<[u32; 2]>,
}

impl From<&SyntheticContext> for ContextFile {
    fn from(c: &SyntheticContext) -> Self {
        Self {
            seed: c.seed,
            tokens: c.tokens.clone(),
            facts: c.facts.iter().map(|f| [f.key, f.value]).collect(),
        }
    }
}

impl From<ContextFile> for SyntheticContext {
    fn from(c: ContextFile) -> Self {
        SyntheticContext {
            facts: c.facts.iter().map(|&[key, value]| Fact { key, value }).collect(),
            tokens: c.tokens,
            seed: c.seed,
        }
    }
}

fn format_err(path: &Path, source: crate::error::FormatError) -> LccError {
    LccError::Format {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let (w, ok) = format::deserialize_checkpoint(&read_bytes(path)?).map_err(|e| format_err(path, e))?;
    if !ok {
        return Err(LccError::CorruptCheckpoint);
    }
    Ok(w)
}

pub fn save_checkpoint(path: &Path, w: &ModelWeights) -> Result<()> {
    write_bytes(path, &format::serialize_checkpoint(w))
}

pub fn load_artifact(path: &Path) -> Result<BufferArtifact> {
    format::deserialize_artifact(&read_bytes(path)?).map_err(|e| format_err(path, e))
}

pub fn save_artifact(path: &Path, a: &BufferArtifact) -> Result<()> {
    write_bytes(path, &format::serialize_artifact(a))
}

/// Load an adapter sidecar and check it belongs to `artifact` and `model`.
pub fn load_adapter(path: &Path, model: Fingerprint, artifact: &BufferArtifact) -> Result<LoraAdapter> {
    let f = format::deserialize_adapter(&read_bytes(path)?).map_err(|e| format_err(path, e))?;
    if f.model != model || f.config_hash != artifact.meta.config_hash {
        return Err(lcc_core::Error::IncompatibleModel.into());
    }
    Ok(f.adapter)
}

pub fn save_adapter(path: &Path, adapter: &LoraAdapter, artifact: &BufferArtifact, d_model: usize) -> Result<()> {
    let bytes = format::serialize_adapter(adapter, artifact.model_fingerprint, artifact.meta.config_hash, d_model);
    write_bytes(path, &bytes)
}

/// `dir/stem.ext`
pub fn sibling(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}.{ext}"))
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

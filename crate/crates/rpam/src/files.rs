//! JSON documents (PL dataset, model config sidecar, prompt maps) and
//! content hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rpam_core::{ModelConfig, PLDataset, TokenId};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sidecar file name holding the [`ModelConfig`] of the checkpoints in a
/// directory.
pub const CONFIG_SIDECAR: &str = "config.json";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn io(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("document serializes");
    v.push(b'\n');
    v
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), FileError> {
    let path = path.as_ref();
    fs::write(path, to_json_bytes(value)).map_err(|e| io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, FileError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| FileError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String, FileError> {
    let path = path.as_ref();
    Ok(sha256_hex(&fs::read(path).map_err(|e| io(path, e))?))
}

pub fn read_pl_dataset(path: impl AsRef<Path>) -> Result<PLDataset, FileError> {
    let path = path.as_ref();
    let ds: PLDataset = read_json(path)?;
    let invalid = |message: String| FileError::Invalid {
        path: path.display().to_string(),
        message,
    };
    if ds.labels.is_empty() {
        return Err(invalid("no labels".into()));
    }
    for w in ds.labels.windows(2) {
        if w[0].query_id >= w[1].query_id {
            return Err(invalid(format!(
                "labels must be sorted by unique query_id (`{}` before `{}`)",
                w[0].query_id, w[1].query_id
            )));
        }
    }
    if let Some(l) = ds.labels.iter().find(|l| l.positive == l.negative) {
        return Err(invalid(format!("label `{}` has positive == negative", l.query_id)));
    }
    Ok(ds)
}

pub fn read_model_config(path: impl AsRef<Path>) -> Result<ModelConfig, FileError> {
    let path = path.as_ref();
    let cfg: ModelConfig = read_json(path)?;
    cfg.validate().map_err(|e| FileError::Invalid {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(cfg)
}

/// The sidecar path for a checkpoint file.
pub fn sidecar_for(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(CONFIG_SIDECAR)
}

pub type PromptMap = BTreeMap<String, Vec<TokenId>>;

pub fn read_prompts(path: impl AsRef<Path>) -> Result<PromptMap, FileError> {
    let path = path.as_ref();
    let prompts: PromptMap = read_json(path)?;
    if let Some((q, _)) = prompts.iter().find(|(_, t)| t.is_empty()) {
        return Err(FileError::Invalid {
            path: path.display().to_string(),
            message: format!("prompt for `{q}` is empty"),
        });
    }
    Ok(prompts)
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{ModelWeights, PSNNConfig, Param};
use crate::error::{read_json, write_json, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the blob.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    fingerprint: String,
    config: PSNNConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// `(manifest, blob)` paths for a model stem; accepts the stem or either
/// file name.
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".weights.json")
        .or_else(|| s.strip_suffix(".weights.bin"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.weights.json")), PathBuf::from(format!("{stem}.weights.bin")))
}

pub fn save_model(w: &ModelWeights<f32>, path: &Path) -> Result<()> {
    let (json, bin) = model_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut offset = 0;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for p in &w.params {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone(), offset });
        offset += p.data.len();
        for v in &p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = ModelManifest {
        fingerprint: w.config.fingerprint(),
        config: w.config.clone(),
        dtype: "f32le".into(),
        tensors,
    };
    write_json(&json, &manifest)?;
    std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))
}

/// Loads a model; when `expected` is given its fingerprint must match the
/// stored one.
pub fn load_model(path: &Path, expected: Option<&PSNNConfig>) -> Result<ModelWeights<f32>> {
    let (json, bin) = model_paths(path);
    let manifest: ModelManifest = read_json(&json)?;
    if manifest.fingerprint != manifest.config.fingerprint() {
        return Err(Error::ManifestMismatch("stored fingerprint does not match the stored config".into()));
    }
    if let Some(cfg) = expected {
        if cfg.fingerprint() != manifest.fingerprint {
            return Err(Error::ManifestMismatch("model was trained with a different network config".into()));
        }
    }
    if manifest.dtype != "f32le" {
        return Err(Error::ManifestMismatch(format!("unsupported dtype {}", manifest.dtype)));
    }
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::ManifestMismatch("weight blob length is not a multiple of 4".into()));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset.checked_add(len).filter(|&e| e <= values.len()).ok_or_else(|| {
            Error::ManifestMismatch(format!("tensor {} runs past the end of the blob", t.name))
        })?;
        let data = values[t.offset..end].to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData(bin.clone()));
        }
        params.push(Param { name: t.name.clone(), shape: t.shape.clone(), data, trainable: true });
    }
    ModelWeights::from_params(&manifest.config, params)
}

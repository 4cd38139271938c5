//! Model checkpoints: a JSON manifest followed by one CRNF section per
//! tensor.
//!
//! Layout: magic `CRNM`, manifest length `u32`, manifest JSON bytes, then
//! the tensors in manifest order, each a complete CRNF blob. Checkpoints
//! are versioned on disk (`<kind>-0001.crnf`, `<kind>-0002.crnf`, ...) and
//! never overwritten.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const MANIFEST_MAGIC: [u8; 4] = *b"CRNM";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint magic in {0}")]
    BadMagic(String),
    #[error("malformed checkpoint manifest in {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("checkpoint {path} is of kind {found}, expected {expected}")]
    KindMismatch { path: String, expected: String, found: String },
    #[error("tensor section error in {path}: {source}")]
    Tensor {
        path: String,
        #[source]
        source: crate::features::FeatureError,
    },
    #[error("missing tensor {name} in {path}")]
    MissingTensor { path: String, name: String },
    #[error("no {kind} checkpoint found under {dir}")]
    NotFound { kind: String, dir: String },
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Manifest stored ahead of the tensor sections. `extra` carries
/// model-specific scalars such as the embedding projection seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            manifest: Manifest { kind: kind.to_string(), tensors: Vec::new(), extra: BTreeMap::new() },
            tensors: BTreeMap::new(),
        }
    }

    pub fn push_tensor(&mut self, name: &str, matrix: Matrix) {
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            rows: matrix.rows(),
            cols: matrix.cols(),
        });
        self.tensors.insert(name.to_string(), matrix);
    }

    pub fn push_vector(&mut self, name: &str, vector: &[f64]) {
        self.push_tensor(name, Matrix::from_vec(1, vector.len(), vector.to_vec()));
    }

    pub fn set_extra<T: Serialize>(&mut self, key: &str, value: T) {
        self.manifest.extra.insert(
            key.to_string(),
            serde_json::to_value(value).expect("extra value serialization cannot fail"),
        );
    }

    pub fn tensor(&self, path: &Path, name: &str) -> Result<&Matrix, CheckpointError> {
        self.tensors.get(name).ok_or_else(|| CheckpointError::MissingTensor {
            path: path.display().to_string(),
            name: name.to_string(),
        })
    }

    pub fn vector(&self, path: &Path, name: &str) -> Result<Vec<f64>, CheckpointError> {
        Ok(self.tensor(path, name)?.data().to_vec())
    }

    pub fn extra_u64(&self, key: &str) -> Option<u64> {
        self.manifest.extra.get(key).and_then(serde_json::Value::as_u64)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let manifest =
            serde_json::to_vec(&self.manifest).expect("manifest serialization cannot fail");
        let mut buf = Vec::new();
        buf.extend_from_slice(&MANIFEST_MAGIC);
        buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        buf.extend_from_slice(&manifest);
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(&buf).map_err(|e| io_err(path, e))?;
        drop(file);
        for entry in &self.manifest.tensors {
            let m = &self.tensors[&entry.name];
            append_crnf(path, m).map_err(|e| CheckpointError::Tensor {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let display = path.display().to_string();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| io_err(path, e))?;
        if bytes.len() < 8 || bytes[0..4] != MANIFEST_MAGIC {
            return Err(CheckpointError::BadMagic(display));
        }
        let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + manifest_len {
            return Err(CheckpointError::BadManifest {
                path: display,
                reason: "manifest extends past end of file".into(),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
            .map_err(|e| CheckpointError::BadManifest { path: display.clone(), reason: e.to_string() })?;
        let mut offset = 8 + manifest_len;
        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let (matrix, consumed) =
                read_crnf_section(&bytes[offset..]).map_err(|reason| CheckpointError::BadManifest {
                    path: display.clone(),
                    reason: format!("tensor {}: {reason}", entry.name),
                })?;
            if matrix.rows() != entry.rows || matrix.cols() != entry.cols {
                return Err(CheckpointError::BadManifest {
                    path: display.clone(),
                    reason: format!(
                        "tensor {} shape {}x{} does not match manifest {}x{}",
                        entry.name,
                        matrix.rows(),
                        matrix.cols(),
                        entry.rows,
                        entry.cols
                    ),
                });
            }
            tensors.insert(entry.name.clone(), matrix);
            offset += consumed;
        }
        Ok(Self { manifest, tensors })
    }

    pub fn expect_kind(&self, path: &Path, kind: &str) -> Result<(), CheckpointError> {
        if self.manifest.kind != kind {
            return Err(CheckpointError::KindMismatch {
                path: path.display().to_string(),
                expected: kind.to_string(),
                found: self.manifest.kind.clone(),
            });
        }
        Ok(())
    }
}

fn append_crnf(path: &Path, matrix: &Matrix) -> Result<(), crate::features::FeatureError> {
    use crate::features::{CRNF_MAGIC, CRNF_VERSION};
    let mut buf = Vec::with_capacity(16 + matrix.data().len() * 4);
    buf.extend_from_slice(&CRNF_MAGIC);
    buf.extend_from_slice(&CRNF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.cols() as u32).to_le_bytes());
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::OpenOptions::new().append(true).open(path).map_err(|e| {
        crate::features::FeatureError::Io { path: path.display().to_string(), source: e }
    })?;
    file.write_all(&buf).map_err(|e| crate::features::FeatureError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn read_crnf_section(bytes: &[u8]) -> Result<(Matrix, usize), String> {
    use crate::features::{CRNF_MAGIC, CRNF_VERSION};
    if bytes.len() < 16 {
        return Err("section header truncated".into());
    }
    if bytes[0..4] != CRNF_MAGIC {
        return Err("bad section magic".into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CRNF_VERSION {
        return Err(format!("unsupported section version {version}"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + rows * cols * 4;
    if bytes.len() < need {
        return Err("section payload truncated".into());
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[16..need].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err("non-finite tensor value".into());
        }
        data.push(v as f64);
    }
    Ok((Matrix::from_vec(rows, cols, data), need))
}

/// Next free versioned path for `kind` under `dir` (1-based counter).
pub fn next_versioned_path(dir: &Path, kind: &str) -> Result<PathBuf, CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let next = latest_version(dir, kind)?.map_or(1, |(v, _)| v + 1);
    Ok(dir.join(format!("{kind}-{next:04}.crnf")))
}

/// Highest existing version of `kind` under `dir`, if any.
pub fn latest_version(
    dir: &Path,
    kind: &str,
) -> Result<Option<(u32, PathBuf)>, CheckpointError> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(rest) = name.strip_prefix(&format!("{kind}-")) else { continue };
        let Some(num) = rest.strip_suffix(".crnf") else { continue };
        if let Ok(v) = num.parse::<u32>() {
            if best.as_ref().map_or(true, |(b, _)| v > *b) {
                best = Some((v, entry.path()));
            }
        }
    }
    Ok(best)
}

/// Latest checkpoint of `kind` or a missing-artifact error.
pub fn load_latest(dir: &Path, kind: &str) -> Result<(Checkpoint, PathBuf), CheckpointError> {
    let (_, path) = latest_version(dir, kind)?.ok_or_else(|| CheckpointError::NotFound {
        kind: kind.to_string(),
        dir: dir.display().to_string(),
    })?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect_kind(&path, kind)?;
    Ok((ckpt, path))
}

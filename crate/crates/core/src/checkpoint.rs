//! Checkpoints: a JSON manifest (names, shapes, dtype, byte offsets) next to one
//! little-endian raw float blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::MstModel;
use crate::tensor::{DType, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub config: ModelConfig,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|d| d.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

/// Serialises every parameter of `model` in store order.
pub fn encode<T: Real>(model: &MstModel<T>, blob_name: &str, epoch: Option<usize>) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.params().numel() * T::DTYPE.size());
    let mut tensors = Vec::new();
    for (name, t) in model.params().iter() {
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        config: model.config().clone(),
        blob: blob_name.to_string(),
        blob_bytes: blob.len(),
        epoch,
        tensors,
    };
    (manifest, blob)
}

/// Rebuilds a model from a manifest and its blob; names and shapes must match the
/// architecture the manifest's config describes.
pub fn decode<T: Real>(manifest: &Manifest, blob: &[u8]) -> Result<MstModel<T>> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!(
            "checkpoint stores {:?}, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    if blob.len() != manifest.blob_bytes {
        return Err(bad(format!(
            "blob has {} bytes, manifest records {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut model = MstModel::<T>::new(manifest.config.clone(), 0)?;
    if manifest.tensors.len() != model.params().len() {
        return Err(bad(format!(
            "{} tensors stored, architecture has {}",
            manifest.tensors.len(),
            model.params().len()
        )));
    }
    let width = T::DTYPE.size();
    let mut values = Vec::with_capacity(manifest.tensors.len());
    let mut cursor = 0;
    for (entry, (name, expected)) in manifest.tensors.iter().zip(model.params().iter()) {
        if entry.name != name || entry.shape != expected.shape() {
            return Err(bad(format!(
                "tensor {} {:?} does not match parameter {} {:?}",
                entry.name,
                entry.shape,
                name,
                expected.shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + entry.bytes;
        if entry.offset != cursor || entry.bytes != n * width || end > blob.len() {
            return Err(bad(format!("tensor {} has an invalid byte range", entry.name)));
        }
        cursor = end;
        let data = blob[entry.offset..end].chunks_exact(width).map(T::read_le).collect();
        values.push(Tensor::new(&entry.shape, data)?);
    }
    model.params_mut().load(values)?;
    Ok(model)
}

/// Writes `<path>` (manifest) and `<path stem>.bin` (blob). Returns the checkpoint hash.
pub fn save<T: Real>(model: &MstModel<T>, path: &Path, epoch: Option<usize>) -> Result<String> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("invalid checkpoint path {}", path.display())))?;
    let blob_name = format!("{stem}.bin");
    let (manifest, blob) = encode(model, &blob_name, epoch);
    let json = serde_json::to_vec_pretty(&manifest)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob_path(path, &blob_name), &blob)?;
    fs::write(path, &json)?;
    Ok(hash(&json, &blob))
}

pub struct Loaded<T> {
    pub model: MstModel<T>,
    pub manifest: Manifest,
    pub hash: String,
}

pub fn load<T: Real>(path: &Path) -> Result<Loaded<T>> {
    let json = fs::read(path)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let blob = fs::read(blob_path(path, &manifest.blob))?;
    let model = decode(&manifest, &blob)?;
    Ok(Loaded {
        model,
        hash: hash(&json, &blob),
        manifest,
    })
}

/// Hex SHA-256 over manifest bytes followed by blob bytes.
pub fn hash(manifest: &[u8], blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(blob);
    hex::encode(h.finalize())
}

//! Checkpoints: a JSON manifest naming every tensor with its shape and byte
//! range, plus one flat little-endian `f64` blob, row-major per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Packs named tensors into a blob and the matching manifest entries.
pub fn pack<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    (entries, blob)
}

pub fn unpack(entry: &TensorEntry, blob: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let n: usize = entry.shape.iter().product();
    if entry.bytes != n * 8 {
        return Err(corrupt(format!(
            "tensor `{}` declares {} bytes for shape {:?}",
            entry.name, entry.bytes, entry.shape
        )));
    }
    let bytes = blob
        .get(entry.offset..entry.offset + entry.bytes)
        .ok_or_else(|| corrupt(format!("tensor `{}` lies outside the blob", entry.name)))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tensors, blob) = pack(Model::PARAM_NAMES.into_iter().zip(model.params()));
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: manifest_path,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path)?;
    let mut model = Model::zeros(manifest.config.clone())?;
    if manifest.tensors.len() != Model::PARAM_NAMES.len() {
        return Err(Error::Corrupt {
            path: manifest_path,
            message: format!("expected {} tensors", Model::PARAM_NAMES.len()),
        });
    }
    for ((name, slot), entry) in Model::PARAM_NAMES
        .into_iter()
        .zip(model.params_mut())
        .zip(&manifest.tensors)
    {
        if entry.name != name || entry.shape != slot.shape() {
            return Err(Error::Corrupt {
                path: manifest_path,
                message: format!(
                    "expected `{name}` with shape {:?}, found `{}` {:?}",
                    slot.shape(),
                    entry.name,
                    entry.shape
                ),
            });
        }
        *slot = unpack(entry, &blob, &blob_path)?;
    }
    Ok(model)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! File helpers: atomic writes, JSONL, and the raw tensor blob format
//! shared by the model and SAE containers.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialises each item as one JSON line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row of a container's tensor table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub crc32: u32,
}

pub(crate) const DTYPE_F32LE: &str = "f32le";

/// Packs tensors back to back as little-endian `f32`, in the given order.
pub(crate) fn pack_tensors(tensors: &[(&str, Vec<usize>, &[f32])]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut table = Vec::with_capacity(tensors.len());
    for (name, shape, values) in tensors {
        let offset = blob.len() as u64;
        let start = blob.len();
        for v in values.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        table.push(TensorEntry {
            name: (*name).to_string(),
            shape: shape.clone(),
            dtype: DTYPE_F32LE.into(),
            offset,
            crc32: crc32fast::hash(&blob[start..]),
        });
    }
    (table, blob)
}

pub(crate) struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Unpacks and CRC-checks every tensor in `table`.
pub(crate) fn unpack_tensors(table: &[TensorEntry], blob: &[u8]) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::with_capacity(table.len());
    for entry in table {
        if entry.dtype != DTYPE_F32LE {
            return Err(ContainerError::Dtype(entry.dtype.clone()).into());
        }
        let count: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset)
            .map_err(|_| ContainerError::Manifest(format!("offset of `{}` too large", entry.name)))?;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(ContainerError::Checksum {
                tensor: entry.name.clone(),
                detail: format!("blob truncated: need bytes {start}..{end}, have {}", blob.len()),
            }
            .into());
        }
        let bytes = &blob[start..end];
        let crc = crc32fast::hash(bytes);
        if crc != entry.crc32 {
            return Err(ContainerError::Checksum {
                tensor: entry.name.clone(),
                detail: format!("expected crc32 {}, computed {crc}", entry.crc32),
            }
            .into());
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out
            .insert(
                entry.name.clone(),
                Tensor {
                    shape: entry.shape.clone(),
                    values,
                },
            )
            .is_some()
        {
            return Err(ContainerError::Manifest(format!("duplicate tensor `{}`", entry.name)).into());
        }
    }
    Ok(out)
}

/// Removes tensor `name` from `tensors`, checking its shape.
pub(crate) fn take_tensor(tensors: &mut HashMap<String, Tensor>, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))?;
    if t.shape != expected {
        return Err(ContainerError::Shape {
            tensor: name.to_string(),
            expected: expected.to_vec(),
            found: t.shape,
        }
        .into());
    }
    Ok(t.values)
}

pub(crate) fn read_file(path: &Path, missing: impl FnOnce() -> ContainerError) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(missing().into()),
        Err(e) => Err(Error::io(path, e)),
    }
}

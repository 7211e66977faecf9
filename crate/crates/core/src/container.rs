// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint container shared by transformer, language-ID and lens files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LCONFCK\0"
//! version    u32      1
//! header_len u64
//! header     JSON     {"kind", "meta", "tensors": [{"name","shape","offset"}]}
//! data       f32 LE   tensor blocks; `offset` counts bytes from the start of data
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LCONFCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    /// Take a tensor by name, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::ShapeMismatch {
                tensor: name.to_string(),
                detail: "tensor missing from checkpoint".into(),
            })?;
        let t = self.tensors.remove(pos);
        if t.shape != shape {
            return Err(Error::ShapeMismatch {
                tensor: name.to_string(),
                detail: format!("expected {shape:?}, found {:?}", t.shape),
            });
        }
        Ok(t.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(Error::ShapeMismatch {
                    tensor: t.name.clone(),
                    detail: format!("shape {:?} but {} elements", t.shape, t.data.len()),
                });
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::CorruptHeader("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptHeader(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CorruptHeader("header length past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        let data = &bytes[header_end..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start.saturating_add(4 * n);
            if end > data.len() {
                return Err(Error::ShapeMismatch {
                    tensor: entry.name,
                    detail: format!(
                        "block needs bytes [{start}, {end}) but data section has {}",
                        data.len()
                    ),
                });
            }
            let mut values = Vec::with_capacity(n);
            for (i, chunk) in data[start..end].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: entry.name,
                        index: i,
                    });
                }
                values.push(v);
            }
            tensors.push(NamedTensor {
                name: entry.name,
                shape: entry.shape,
                data: values,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Write atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::CorruptHeader(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Write `bytes` to a temporary sibling of `path`, then rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

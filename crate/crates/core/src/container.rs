//! Binary tensor container used for checkpoints and dataset frames.
//!
//! Layout: magic `BXHD`, `u32` version, `u64` manifest length, a JSON
//! manifest, then the raw little-endian payload of every tensor in manifest
//! order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"BXHD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// An in-memory container: named arrays plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, DType, Vec<f64>)>,
}

impl Container {
    pub fn push(&mut self, name: &str, dims: Vec<usize>, dtype: DType, values: Vec<f64>) {
        self.tensors.push((name.to_string(), dims, dtype, values));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|t| t.0 == name)
            .map(|t| (t.1.as_slice(), t.3.as_slice()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, dims, dtype, values) in &self.tensors {
            if dims.iter().product::<usize>() != values.len() {
                return Err(Error::contract(format!("tensor `{name}` dims {dims:?} do not match its length")));
            }
            entries.push(TensorEntry {
                name: name.clone(),
                dims: dims.clone(),
                dtype: *dtype,
                offset,
            });
            offset += values.len() * dtype.width();
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, _, dtype, values) in &self.tensors {
            for &v in values {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing BXHD header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.dims.iter().product();
            let w = e.dtype.width();
            let end = e.offset + n * w;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name)));
            }
            let raw = &payload[e.offset..end];
            let values = raw
                .chunks_exact(w)
                .map(|c| match e.dtype {
                    DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            tensors.push((e.name, e.dims, e.dtype, values));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        let mut c = Container {
            meta: serde_json::json!({"kind": "test"}),
            ..Default::default()
        };
        c.push("a", vec![2, 2], DType::F64, vec![0.1, -2.0, 3.5, 1e-300]);
        c.push("b", vec![3], DType::F32, vec![0.5, 0.25, -1.0]);
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"nope").is_err());
        let mut c = Container::default();
        c.push("a", vec![4], DType::F64, vec![1.0; 4]);
        let mut bytes = c.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("`a`"));
    }
}

//! Self-describing binary container for named tensors.
//!
//! Layout: 8-byte magic `PFCKv001`, little-endian `u64` header length, a JSON
//! header (`dtype`, free-form `meta`, tensor index), then raw little-endian
//! tensor data in index order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PFCKv001";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Container<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| IndexEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * T::BYTES).sum();
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(NnError::Format("missing container magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| NnError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != T::DTYPE {
            return Err(NnError::Dtype { expected: T::DTYPE, found: header.dtype });
        }
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = pos + n * T::BYTES;
            let raw = bytes.get(pos..end).ok_or_else(|| NnError::Format(format!("truncated tensor `{}`", e.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(NnError::Format("trailing bytes after tensor data".into()));
        }
        Ok(Container { meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.encode()?;
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn into_map(self) -> (serde_json::Value, HashMap<String, Tensor<T>>) {
        (self.meta, self.tensors.into_iter().collect())
    }
}

/// Hex SHA-256 of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

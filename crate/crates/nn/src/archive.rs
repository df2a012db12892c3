//! Single-file archive of named tensors plus free-form JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ANFVCKPT"            8-byte magic
//! u32                    format version (1)
//! u32                    header length in bytes
//! header                 UTF-8 JSON: {"dtype", "meta", "tensors": [{"name","shape","offset"}]}
//! payload                raw element data, offsets relative to payload start
//! ```

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ANFVCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    Version(u32),
    #[error("archive truncated")]
    Truncated,
    #[error("archive dtype {found} does not match requested {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error("malformed archive header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor {0} missing from archive")]
    Missing(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write<T: Scalar>(store: &ParamStore<T>, meta: &serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + hjson.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    out
}

/// Parsed archive: metadata plus tensors in file order.
pub struct Archive<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

pub fn read<T: Scalar>(bytes: &[u8]) -> Result<Archive<T>, ArchiveError> {
    if bytes.len() < 16 {
        return Err(ArchiveError::Truncated);
    }
    if &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(ArchiveError::Version(version));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let hend = 16usize.checked_add(hlen).ok_or(ArchiveError::Truncated)?;
    if bytes.len() < hend {
        return Err(ArchiveError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[16..hend])?;
    if header.dtype != T::DTYPE {
        return Err(ArchiveError::Dtype {
            found: header.dtype,
            expected: T::DTYPE,
        });
    }
    let payload = &bytes[hend..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if end > payload.len() {
            return Err(ArchiveError::Truncated);
        }
        let data = payload[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push((e.name, Tensor::from_vec(&e.shape, data)));
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Copies archived tensors into an identically-structured store.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, archive: &Archive<T>) -> Result<(), ArchiveError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (_, t) = archive
            .tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ArchiveError::Missing(name.clone()))?;
        if t.shape() != store.get(id).shape() {
            return Err(ArchiveError::Shape {
                name,
                found: t.shape().to_vec(),
                expected: store.get(id).shape().to_vec(),
            });
        }
        store.set(id, t.clone());
    }
    Ok(())
}

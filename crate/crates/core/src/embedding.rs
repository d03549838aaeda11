//! Id-keyed image embeddings and the `SVEM` binary interchange format.
//!
//! Layout, all integers little-endian, no padding:
//!
//! ```text
//! "SVEM"            4 bytes
//! version  u32      = 1
//! dim      u32
//! count    u64
//! count × { id_len u16, id bytes (UTF-8), dim × f32 }
//! ```
//!
//! A JSON descriptor `{path, dim, count, sha256}` is written next to every
//! store as `<store>.json`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StoreError};
use crate::io::{read_json, sha256_bytes, write_atomic_bytes, write_json_pretty};

pub const MAGIC: &[u8; 4] = b"SVEM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub vector: Vec<f32>,
}

/// Anything that can hand out a fixed-dimension vector per image id.
///
/// Lookups must be repeatable: the same id always yields the same bits.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;

    fn get(&self, image_id: &str) -> Result<Cow<'_, [f32]>>;
}

/// In-memory store with insertion order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Validates uniform dimension, unique ids and finite components.
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self, StoreError> {
        if dim == 0 && !records.is_empty() {
            return Err(StoreError::ZeroDimension {
                count: records.len() as u64,
            });
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.image_id.is_empty() {
                return Err(StoreError::EmptyId { offset: 0 });
            }
            if r.vector.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    id: r.image_id.clone(),
                    expected: dim,
                    actual: r.vector.len(),
                });
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite {
                    id: r.image_id.clone(),
                    offset: None,
                });
            }
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId {
                    id: r.image_id.clone(),
                    offset: None,
                });
            }
        }
        Ok(Self {
            dim,
            records,
            index,
        })
    }

    /// Dimension taken from the first record (0 for an empty store).
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, StoreError> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        Self::new(dim, records)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.index.contains_key(image_id)
    }

    /// Copy of the store with every vector scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                l2_normalize(&r.vector)
                    .map(|vector| EmbeddingRecord {
                        image_id: r.image_id.clone(),
                        vector,
                    })
                    .map_err(|e| Error::Validation(format!("record {}: {e}", r.image_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(self.dim, records)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>, StoreError> {
        let per_record = self.dim * 4 + 2;
        let ids: usize = self.records.iter().map(|r| r.image_id.len()).sum();
        let mut buf = Vec::with_capacity(HEADER_LEN + self.records.len() * per_record + ids);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            let id = r.image_id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| StoreError::IdTooLong {
                id: r.image_id.clone(),
            })?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(id);
            for x in &r.vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic").map_err(|e| match e {
            StoreError::Truncated { .. } => StoreError::BadMagic {
                found: bytes.to_vec(),
            },
            other => other,
        })?;
        if magic != MAGIC {
            return Err(StoreError::BadMagic {
                found: magic.to_vec(),
            });
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion { version });
        }
        let dim = cur.u32("dimension")? as usize;
        let count = cur.u64("record count")?;
        if dim == 0 && count > 0 {
            return Err(StoreError::ZeroDimension { count });
        }
        // never trust `count` for allocation beyond what the bytes can hold
        let min_record = 2 + 1 + dim * 4;
        let cap = (bytes.len().saturating_sub(HEADER_LEN) / min_record).min(count as usize);
        let mut records = Vec::with_capacity(cap);
        let mut index = HashMap::with_capacity(cap);
        for _ in 0..count {
            let record_offset = cur.pos;
            let id_len = cur.u16("id length")? as usize;
            if id_len == 0 {
                return Err(StoreError::EmptyId {
                    offset: record_offset,
                });
            }
            let id_offset = cur.pos;
            let id = std::str::from_utf8(cur.take(id_len, "record id")?)
                .map_err(|_| StoreError::InvalidId { offset: id_offset })?
                .to_owned();
            let vec_offset = cur.pos;
            let raw = cur.take(dim * 4, "vector")?;
            let vector: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(k) = vector.iter().position(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite {
                    id,
                    offset: Some(vec_offset + 4 * k),
                });
            }
            if index.insert(id.clone(), records.len()).is_some() {
                return Err(StoreError::DuplicateId {
                    id,
                    offset: Some(record_offset),
                });
            }
            records.push(EmbeddingRecord {
                image_id: id,
                vector,
            });
        }
        if cur.pos != bytes.len() {
            return Err(StoreError::TrailingBytes {
                offset: cur.pos,
                extra: bytes.len() - cur.pos,
            });
        }
        Ok(Self {
            dim,
            records,
            index,
        })
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn get(&self, image_id: &str) -> Result<Cow<'_, [f32]>> {
        self.index
            .get(image_id)
            .map(|&i| Cow::Borrowed(self.records[i].vector.as_slice()))
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_owned()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(StoreError::Truncated {
                offset: self.pos,
                needed: n - remaining,
                what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, StoreError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Sidecar metadata written next to each store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDescriptor {
    pub path: String,
    pub dim: usize,
    pub count: usize,
    pub sha256: String,
}

pub fn descriptor_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the store and its descriptor atomically; returns the store's size
/// in bytes.
pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<u64> {
    let bytes = store.encode()?;
    write_atomic_bytes(path, &bytes)?;
    let descriptor = StoreDescriptor {
        path: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        dim: store.dim(),
        count: store.len(),
        sha256: sha256_bytes(&bytes),
    };
    write_json_pretty(&descriptor_path(path), &descriptor)?;
    Ok(bytes.len() as u64)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::decode(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Reads a store and cross-checks it against its descriptor, when present.
pub fn read_store_verified(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let desc_path = descriptor_path(path);
    if desc_path.exists() {
        let desc: StoreDescriptor = read_json(&desc_path)?;
        let digest = sha256_bytes(&bytes);
        if desc.sha256 != digest {
            return Err(Error::parse(
                desc_path.display().to_string(),
                format!("sha256 mismatch: descriptor {} vs file {digest}", desc.sha256),
            ));
        }
    }
    EmbeddingStore::decode(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Scales a vector to unit L2 norm (accumulated in f64).
pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Validation(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

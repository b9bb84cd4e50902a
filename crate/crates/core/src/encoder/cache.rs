//! Binary embedding cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! "OFFE" | u32 version | u32 dimension | u64 record count
//! u16 backend_id length | backend_id bytes
//! per record: u16 id length | id bytes | dimension x f32
//! u32 CRC32 of every preceding byte
//! ```
//!
//! The source manifest (root directory and per-file content hashes) lives in a
//! JSON sidecar next to the cache file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingSpace};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: [u8; 4] = *b"OFFE";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    /// Directory the ids are relative to, when the cache came from a scan.
    pub root: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

impl SourceManifest {
    pub fn is_empty(&self) -> bool {
        self.root.is_none() && self.entries.is_empty()
    }

    /// Linear scan; build a map when looking up many ids.
    pub fn hash_of(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.sha256.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    space: EmbeddingSpace,
    records: Vec<CacheRecord>,
    index: HashMap<String, usize>,
    pub manifest: SourceManifest,
}

impl PartialEq for EmbeddingCache {
    fn eq(&self, other: &Self) -> bool {
        self.space == other.space
            && self.manifest == other.manifest
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.id == b.id
                    && a.vector.len() == b.vector.len()
                    && a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl EmbeddingCache {
    pub fn new(space: EmbeddingSpace, records: Vec<CacheRecord>) -> Result<Self> {
        if space.dimension == 0 {
            return Err(Error::InvalidArgument("dimension must be > 0".into()));
        }
        if space.backend_id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("backend_id too long".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != space.dimension {
                return Err(Error::DimensionMismatch {
                    expected: space.dimension,
                    found: r.vector.len(),
                });
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite);
            }
            if r.id.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!("id too long: {}", r.id.len())));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            space,
            records,
            index,
            manifest: SourceManifest::default(),
        })
    }

    pub fn from_embeddings(space: EmbeddingSpace, embeddings: &[Embedding]) -> Result<Self> {
        let records = embeddings
            .iter()
            .map(|e| CacheRecord {
                id: e.id.clone(),
                vector: e.vector.iter().map(|&x| x as f32).collect(),
            })
            .collect();
        Self::new(space, records)
    }

    pub fn with_manifest(mut self, manifest: SourceManifest) -> Self {
        self.manifest = manifest;
        self
    }

    pub fn space(&self) -> &EmbeddingSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&CacheRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn embedding(&self, id: &str) -> Option<Embedding> {
        self.get(id).map(|r| Embedding::from_f32(&r.id, &r.vector))
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        self.records
            .iter()
            .map(|r| Embedding::from_f32(&r.id, &r.vector))
            .collect()
    }

    /// Exact size of the encoded file in bytes.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 4 + 4 + 8 + 2 + self.space.backend_id.len();
        let records: usize = self
            .records
            .iter()
            .map(|r| 2 + r.id.len() + 4 * self.space.dimension)
            .sum();
        header + records + 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.space.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.space.backend_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.space.backend_id.as_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            for x in &r.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::CorruptCache("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        if bytes.len() < 4 {
            return Err(Error::CorruptCache("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptCache("checksum mismatch".into()));
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let dimension = r.u32()? as usize;
        if dimension == 0 {
            return Err(Error::CorruptCache("zero dimension".into()));
        }
        let count = r.u64()?;
        let backend_len = r.u16()? as usize;
        let backend_id = r.string(backend_len)?;
        let per_record_min = 2 + 4 * dimension as u64;
        if count.saturating_mul(per_record_min) > r.remaining() as u64 {
            return Err(Error::CorruptCache(format!(
                "header claims {count} records but only {} bytes remain",
                r.remaining()
            )));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id_len = r.u16()? as usize;
            let id = r.string(id_len)?;
            let raw = r.take(4 * dimension)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(CacheRecord { id, vector });
        }
        if r.remaining() != 0 {
            return Err(Error::CorruptCache(format!(
                "{} trailing bytes after {count} records",
                r.remaining()
            )));
        }
        Self::new(EmbeddingSpace::new(dimension, backend_id), records).map_err(|e| match e {
            Error::DuplicateId(id) => Error::CorruptCache(format!("duplicate id {id:?}")),
            other => Error::CorruptCache(other.to_string()),
        })
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        path.with_file_name(name)
    }

    /// Writes the cache and, when non-empty, its manifest sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
        let sidecar = Self::manifest_path(path);
        if self.manifest.is_empty() {
            if sidecar.exists() {
                std::fs::remove_file(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            }
        } else {
            let json = serde_json::to_vec_pretty(&self.manifest)?;
            std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cache = Self::from_bytes(&bytes)?;
        let sidecar = Self::manifest_path(path);
        let manifest = if sidecar.exists() {
            let text = std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            serde_json::from_slice(&text)
                .map_err(|e| Error::CorruptCache(format!("manifest {}: {e}", sidecar.display())))?
        } else {
            SourceManifest::default()
        };
        Ok(cache.with_manifest(manifest))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::CorruptCache(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::CorruptCache("id is not UTF-8".into()))
    }
}

//! The EHRE v1 embedding store, a deterministic stub embedder, and assembly of
//! per-horizon feature vectors.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! 0..4    magic "EHRE"
//! 4..6    u16 version (1)
//! 6..8    u16 reserved (0)
//! 8..12   u32 dim
//! 12..20  u64 record count
//! then per record, sorted by key with no duplicates:
//!         u64 hadm_id, u8 category code, u8 day, u16 padding (0), dim × f32
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::bucketing::{BucketGrid, Fill, NoteCategory, CATEGORY_COUNT};
use crate::error::{Error, Result};
use crate::seed;

pub const MAGIC: &[u8; 4] = b"EHRE";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const RECORD_KEY_LEN: usize = 12;
pub const DEFAULT_DIM: u32 = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StoreKey {
    pub hadm_id: u64,
    pub category: u8,
    pub day: u8,
}

impl StoreKey {
    pub fn new(hadm_id: u64, category: NoteCategory, day: u8) -> Self {
        StoreKey {
            hadm_id,
            category: category.code(),
            day,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: u32,
    entries: BTreeMap<StoreKey, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: u32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::StoreFormat("dim must be at least 1".into()));
        }
        Ok(EmbeddingStore {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &StoreKey) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StoreKey, &[f32])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Adds a vector; rejects wrong lengths, non-finite values and repeated keys.
    pub fn insert(&mut self, key: StoreKey, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::StoreFormat(format!(
                "non-finite value at component {bad} of {key:?}"
            )));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::StoreFormat(format!("duplicate key {key:?}")));
        }
        self.entries.insert(key, values);
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.entries.len() * (RECORD_KEY_LEN + 4 * self.dim())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&self.dim.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, values) in &self.entries {
            buf.extend_from_slice(&key.hadm_id.to_le_bytes());
            buf.push(key.category);
            buf.push(key.day);
            buf.extend_from_slice(&0u16.to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::StoreFormat(format!(
                "truncated header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::StoreFormat(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::StoreFormat(format!("unsupported version {version}")));
        }
        if bytes[6..8] != [0, 0] {
            return Err(Error::StoreFormat("reserved header field is not zero".into()));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let mut store = EmbeddingStore::new(dim)?;

        let record_len = RECORD_KEY_LEN as u64 + 4 * u64::from(dim);
        let expected = count
            .checked_mul(record_len)
            .and_then(|n| n.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| Error::StoreFormat("record count overflows".into()))?;
        if (bytes.len() as u64) < expected {
            return Err(Error::StoreFormat(format!(
                "truncated: {} bytes, header promises {expected}",
                bytes.len()
            )));
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::StoreFormat(format!(
                "{} trailing bytes after {count} records",
                bytes.len() as u64 - expected
            )));
        }

        let mut prev: Option<StoreKey> = None;
        for rec in bytes[HEADER_LEN..].chunks_exact(record_len as usize) {
            let key = StoreKey {
                hadm_id: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
                category: rec[8],
                day: rec[9],
            };
            if rec[10..12] != [0, 0] {
                return Err(Error::StoreFormat(format!("non-zero padding in {key:?}")));
            }
            if NoteCategory::from_code(key.category).is_none() {
                return Err(Error::StoreFormat(format!("unknown category code in {key:?}")));
            }
            match prev {
                Some(p) if p == key => {
                    return Err(Error::StoreFormat(format!("duplicate key {key:?}")))
                }
                Some(p) if p > key => {
                    return Err(Error::StoreFormat(format!("records out of order at {key:?}")))
                }
                _ => {}
            }
            prev = Some(key);
            let values = rec[RECORD_KEY_LEN..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(key, values)?;
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    store.write(path)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::read(path)
}

/// Deterministic unit-norm pseudo-embedding of `text`, for tests and dry runs.
pub fn stub_embed(text: &str, dim: usize, seed_value: u64) -> Vec<f32> {
    let mut key = Vec::with_capacity(8 + text.len());
    key.extend_from_slice(&seed_value.to_le_bytes());
    key.extend_from_slice(text.as_bytes());
    let mut rng = seed::rng(seed::splitmix64(seed::fnv1a64(&key)));
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    raw.iter().map(|v| (v / norm) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub hadm_id: u64,
    pub horizon: u8,
    pub values: Vec<f32>,
}

/// Concatenates embeddings for days `1..=n`, day-major then category code.
/// Copied cells reuse their source cell's vector; empty cells are zeros.
pub fn assemble_features(grid: &BucketGrid, store: &EmbeddingStore, n: u8) -> Result<FeatureVector> {
    if n < 1 || n > grid.horizon {
        return Err(Error::Config(format!(
            "horizon {n} outside 1..={}",
            grid.horizon
        )));
    }
    let dim = store.dim();
    let mut values = Vec::with_capacity(n as usize * CATEGORY_COUNT * dim);
    for day in 1..=n {
        for category in NoteCategory::ALL {
            let cell = grid.cell(category, day);
            match (cell.fill, cell.source_day) {
                (Fill::Empty, _) => values.extend(std::iter::repeat_n(0.0, dim)),
                (_, Some(src)) => {
                    let key = StoreKey::new(grid.hadm_id, category, src);
                    let v = store.get(&key).ok_or(Error::MissingEmbedding {
                        hadm_id: key.hadm_id,
                        category: key.category,
                        day: key.day,
                    })?;
                    values.extend_from_slice(v);
                }
                (fill, None) => {
                    return Err(Error::InvalidGrid(format!(
                        "{fill:?} cell without source day at ({category}, {day})"
                    )))
                }
            }
        }
    }
    Ok(FeatureVector {
        hadm_id: grid.hadm_id,
        horizon: n,
        values,
    })
}

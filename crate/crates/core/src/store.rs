//! Binary store of cached encoder embeddings plus the JSON clip-metadata
//! sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MERITEMB" | version u32 | dim u32 | n_blocks u32 | block_dim u32 | record_count u64
//! record_count × [ id_len u16 | id bytes (UTF-8) | dim × f32 ]
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::TripletManifest;
use crate::linalg::to_f64;
use crate::{MeritError, Result};

pub const STORE_MAGIC: &[u8; 8] = b"MERITEMB";
pub const STORE_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 8 + 4 * 4 + 8;

/// Layer-block layout of the encoder embedding: 5 × 1024 for the
/// multi-layer backbone representation.
pub const DEFAULT_N_BLOCKS: usize = 5;
pub const DEFAULT_BLOCK_DIM: usize = 1024;
pub const DEFAULT_DIM: usize = DEFAULT_N_BLOCKS * DEFAULT_BLOCK_DIM;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub clip_id: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(clip_id: impl Into<String>, vector: Vec<f32>) -> Self {
        EmbeddingRecord {
            clip_id: clip_id.into(),
            vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n_blocks: usize,
    pub block_dim: usize,
}

impl BlockLayout {
    pub fn new(n_blocks: usize, block_dim: usize) -> Result<Self> {
        if n_blocks == 0 || block_dim == 0 {
            return Err(MeritError::config("block layout dims must be >= 1"));
        }
        Ok(BlockLayout {
            n_blocks,
            block_dim,
        })
    }

    /// Whole vector as one block.
    pub fn single(dim: usize) -> Self {
        BlockLayout {
            n_blocks: 1,
            block_dim: dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }
}

impl Default for BlockLayout {
    fn default() -> Self {
        BlockLayout {
            n_blocks: DEFAULT_N_BLOCKS,
            block_dim: DEFAULT_BLOCK_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub dim: u32,
    pub n_blocks: u32,
    pub block_dim: u32,
    pub record_count: u64,
}

impl StoreHeader {
    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            n_blocks: self.n_blocks as usize,
            block_dim: self.block_dim as usize,
        }
    }
}

fn check_records(records: &[EmbeddingRecord], dim: usize) -> Result<()> {
    if records.is_empty() {
        return Err(MeritError::EmptyStore);
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.clip_id.is_empty() {
            return Err(MeritError::EmptyId);
        }
        if !seen.insert(r.clip_id.as_str()) {
            return Err(MeritError::DuplicateId(r.clip_id.clone()));
        }
        if r.vector.len() != dim {
            return Err(MeritError::dim(dim, r.vector.len(), format!("record {:?}", r.clip_id)));
        }
        if r.vector.iter().any(|x| !x.is_finite()) {
            return Err(MeritError::NonFinite(format!("record {:?}", r.clip_id)));
        }
    }
    Ok(())
}

/// Serializes records into the binary store format.
pub fn encode_store(records: &[EmbeddingRecord], layout: BlockLayout) -> Result<Vec<u8>> {
    let dim = layout.dim();
    check_records(records, dim)?;
    let mut w = Writer::new();
    w.buf.reserve(HEADER_BYTES + records.len() * (2 + 16 + dim * 4));
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u32(dim as u32);
    w.u32(layout.n_blocks as u32);
    w.u32(layout.block_dim as u32);
    w.u64(records.len() as u64);
    for r in records {
        w.id(&r.clip_id)?;
        w.f32s(r.vector.iter().copied());
    }
    Ok(w.buf)
}

pub fn write_store(records: &[EmbeddingRecord], layout: BlockLayout, path: &Path) -> Result<()> {
    let bytes = encode_store(records, layout)?;
    fs::write(path, bytes).map_err(|e| MeritError::io(path, e))
}

pub fn decode_store(bytes: &[u8]) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let mut r = Reader::new(bytes);
    r.magic(STORE_MAGIC)?;
    let version = r.u32("version")?;
    if version != STORE_VERSION {
        return Err(MeritError::UnsupportedVersion(version));
    }
    let header = StoreHeader {
        version,
        dim: r.u32("dim")?,
        n_blocks: r.u32("n_blocks")?,
        block_dim: r.u32("block_dim")?,
        record_count: r.u64("record_count")?,
    };
    if header.n_blocks as u64 * header.block_dim as u64 != header.dim as u64 {
        return Err(MeritError::InvalidHeader(format!(
            "n_blocks {} x block_dim {} != dim {}",
            header.n_blocks, header.block_dim, header.dim
        )));
    }
    let dim = header.dim as usize;
    let mut records = Vec::new();
    while r.remaining() > 0 {
        if records.len() as u64 == header.record_count {
            return Err(MeritError::CountMismatch {
                header: header.record_count,
                actual: records.len() as u64 + 1,
            });
        }
        let clip_id = r.id("record id")?;
        let vector = r.f32s(dim, "record vector")?;
        records.push(EmbeddingRecord { clip_id, vector });
    }
    if records.len() as u64 != header.record_count {
        return Err(MeritError::CountMismatch {
            header: header.record_count,
            actual: records.len() as u64,
        });
    }
    Ok((header, records))
}

pub fn read_store(path: &Path) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let bytes = fs::read(path).map_err(|e| MeritError::io(path, e))?;
    decode_store(&bytes)
}

/// Immutable in-memory store with id lookup; vectors widened to f64.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    header: StoreHeader,
    ids: Vec<String>,
    data: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn from_records(header: StoreHeader, records: &[EmbeddingRecord]) -> Result<Self> {
        let dim = header.dim as usize;
        check_records(records, dim)?;
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut ids = Vec::with_capacity(records.len());
        let mut lookup = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            data.extend(to_f64(&r.vector));
            ids.push(r.clip_id.clone());
            lookup.insert(r.clip_id.clone(), i);
        }
        Ok(EmbeddingStore {
            header,
            ids,
            data,
            lookup,
        })
    }

    pub fn with_layout(records: &[EmbeddingRecord], layout: BlockLayout) -> Result<Self> {
        let header = StoreHeader {
            version: STORE_VERSION,
            dim: layout.dim() as u32,
            n_blocks: layout.n_blocks as u32,
            block_dim: layout.block_dim as u32,
            record_count: records.len() as u64,
        };
        Self::from_records(header, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = read_store(path)?;
        Self::from_records(header, &records)
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, clip_id: &str) -> Option<usize> {
        self.lookup.get(clip_id).copied()
    }

    pub fn resolve(&self, clip_id: &str) -> Result<usize> {
        self.index_of(clip_id)
            .ok_or_else(|| MeritError::UnknownId(clip_id.to_string()))
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        let d = self.dim();
        &self.data[row * d..(row + 1) * d]
    }

    pub fn get(&self, clip_id: &str) -> Option<&[f64]> {
        self.index_of(clip_id).map(|i| self.vector(i))
    }
}

/// Per-clip metadata kept in the JSON sidecar, keyed by clip id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub clip_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folder_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_song_id: Option<String>,
}

pub type MetaTable = BTreeMap<String, ClipMeta>;

pub fn write_meta(metas: &MetaTable, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(metas).map_err(|e| MeritError::parse("metadata", e))?;
    fs::write(path, json + "\n").map_err(|e| MeritError::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<MetaTable> {
    let text = fs::read_to_string(path).map_err(|e| MeritError::io(path, e))?;
    let mut metas: MetaTable =
        serde_json::from_str(&text).map_err(|e| MeritError::parse("metadata", e))?;
    for (key, meta) in metas.iter_mut() {
        if meta.clip_id.is_empty() {
            meta.clip_id = key.clone();
        } else if meta.clip_id != *key {
            return Err(MeritError::parse(
                "metadata",
                format!("key {key:?} holds clip_id {:?}", meta.clip_id),
            ));
        }
    }
    Ok(metas)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Clip ids referenced by manifests but absent from the store.
    pub unresolved_ids: Vec<String>,
    pub dim_mismatches: Vec<DimMismatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimMismatchEntry {
    pub source: String,
    pub expected: usize,
    pub actual: usize,
}

impl ValidationReport {
    pub fn is_consistent(&self) -> bool {
        self.unresolved_ids.is_empty() && self.dim_mismatches.is_empty()
    }

    pub fn merge(&mut self, other: ValidationReport) {
        for id in other.unresolved_ids {
            if !self.unresolved_ids.contains(&id) {
                self.unresolved_ids.push(id);
            }
        }
        self.dim_mismatches.extend(other.dim_mismatches);
    }
}

/// Cross-checks a manifest against store contents. Inconsistencies are
/// reported, never raised.
pub fn validate_records(
    header: &StoreHeader,
    records: &[EmbeddingRecord],
    manifest: &TripletManifest,
) -> ValidationReport {
    let ids: HashSet<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
    let mut report = ValidationReport::default();
    let mut reported = HashSet::new();
    for t in &manifest.triplets {
        for id in [&t.anchor_id, &t.positive_id, &t.negative_id] {
            if !ids.contains(id.as_str()) && reported.insert(id.clone()) {
                report.unresolved_ids.push(id.clone());
            }
        }
    }
    if let Some(expected) = manifest.dim {
        if expected != header.dim as usize {
            report.dim_mismatches.push(DimMismatchEntry {
                source: format!("{} {} manifest", manifest.factor, manifest.split),
                expected,
                actual: header.dim as usize,
            });
        }
    }
    for r in records {
        if r.vector.len() != header.dim as usize {
            report.dim_mismatches.push(DimMismatchEntry {
                source: format!("record {:?}", r.clip_id),
                expected: header.dim as usize,
                actual: r.vector.len(),
            });
        }
    }
    report
}

pub fn validate_store(path: &Path, manifest: &TripletManifest) -> Result<ValidationReport> {
    let (header, records) = read_store(path)?;
    Ok(validate_records(&header, &records, manifest))
}

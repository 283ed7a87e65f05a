use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::{grid_extent, parse_chunk_name};
use super::{ArrayStorageMetadata, Layout};
use crate::error::{Error, Result};
use crate::json;
use crate::sharding::ShardingDescriptor;
use crate::storage::Storage;
use crate::tree::join;

pub const ARRAY_METADATA: &str = "array_metadata.json";
pub const MANIFEST: &str = "manifest.json";
pub const MERGED_INDEX: &str = "merged_index.json";

pub fn process_dir(ckpt: &str, process: usize) -> String {
    join(ckpt, &format!("process_{process}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessArrayEntry {
    pub storage: ArrayStorageMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharding: Option<ShardingDescriptor>,
    /// Write-chunk names this process stored, e.g. `c.0.3`.
    pub chunks: Vec<String>,
}

/// `process_<i>/array_metadata.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessIndexDoc {
    pub process: usize,
    pub layout: Layout,
    pub arrays: BTreeMap<String, ProcessArrayEntry>,
}

impl ProcessIndexDoc {
    pub fn to_bytes(&self) -> Vec<u8> {
        json::to_canonical_vec(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// `<leaf_path>/c.<coords>`
    pub key: String,
    pub file: u64,
    pub offset: u64,
    pub length: u64,
}

/// `process_<i>/manifest.json`: chunk key -> byte range in a data file, sorted by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedManifest {
    pub target_file_bytes: u64,
    pub entries: Vec<ManifestEntry>,
}

impl AggregatedManifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        json::to_canonical_vec(self)
    }

    pub fn lookup(&self, key: &str) -> Option<&ManifestEntry> {
        self.entries.binary_search_by(|e| e.key.as_str().cmp(key)).ok().map(|i| &self.entries[i])
    }

    /// Keys strictly ascending and no overlapping byte ranges within a file.
    pub fn validate(&self) -> Result<()> {
        if self.entries.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::Corruption("manifest keys are not strictly sorted".into()));
        }
        let mut by_file: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
        for e in &self.entries {
            by_file.entry(e.file).or_default().push((e.offset, e.offset + e.length));
        }
        for (file, mut spans) in by_file {
            spans.sort();
            if spans.windows(2).any(|w| w[0].1 > w[1].0) {
                return Err(Error::Corruption(format!("overlapping manifest ranges in data file {file}")));
            }
        }
        Ok(())
    }
}

/// Where one write chunk lives, relative to the checkpoint directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLocation {
    pub process: usize,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedArrayEntry {
    pub storage: ArrayStorageMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharding: Option<ShardingDescriptor>,
    pub chunks: BTreeMap<String, ChunkLocation>,
}

impl MergedArrayEntry {
    pub fn locate(&self, coords: &[usize]) -> Option<&ChunkLocation> {
        self.chunks.get(&super::grid::chunk_name(coords))
    }
}

/// `merged_index.json`: every chunk of every array, pointing into process directories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedIndexDoc {
    pub format_version: u32,
    pub layout: Layout,
    pub process_count: usize,
    pub arrays: BTreeMap<String, MergedArrayEntry>,
}

impl MergedIndexDoc {
    pub fn to_bytes(&self) -> Vec<u8> {
        json::to_canonical_vec(self)
    }

    pub fn parse(key: &str, bytes: &[u8]) -> Result<Self> {
        json::from_slice(key, bytes)
    }
}

fn expected_chunk_count(meta: &ArrayStorageMetadata) -> usize {
    if meta.num_elements() == 0 {
        return 0;
    }
    grid_extent(&meta.global_shape, &meta.write_chunk).iter().product()
}

/// Combines all `process_<i>/array_metadata.json` (and manifests) under `ckpt`
/// into one index. Reads metadata documents only.
pub fn merge_process_indices(storage: &Storage, ckpt: &str, process_count: usize) -> Result<MergedIndexDoc> {
    let mut layout = None;
    let mut arrays: BTreeMap<String, MergedArrayEntry> = BTreeMap::new();
    for p in 0..process_count {
        let dir = process_dir(ckpt, p);
        let key = join(&dir, ARRAY_METADATA);
        let doc: ProcessIndexDoc = match storage.get(&key) {
            Ok(bytes) => json::from_slice(&key, &bytes)?,
            Err(Error::NotFound(_)) => return Err(Error::Inconsistent(format!("missing process metadata {key}"))),
            Err(e) => return Err(e),
        };
        if doc.process != p {
            return Err(Error::Inconsistent(format!("{key} claims process {}", doc.process)));
        }
        match layout {
            None => layout = Some(doc.layout),
            Some(l) if l != doc.layout => {
                return Err(Error::Inconsistent(format!("process {p} used layout {} but process 0 used {l}", doc.layout)))
            }
            _ => {}
        }
        let manifest = if doc.layout == Layout::Aggregated {
            let mkey = join(&dir, MANIFEST);
            let m: AggregatedManifest = json::from_slice(&mkey, &storage.get(&mkey)?)?;
            m.validate()?;
            Some(m)
        } else {
            None
        };
        let rel_dir = format!("process_{p}");
        for (leaf, entry) in doc.arrays {
            let merged = arrays.entry(leaf.clone()).or_insert_with(|| MergedArrayEntry {
                storage: entry.storage.clone(),
                sharding: entry.sharding.clone(),
                chunks: BTreeMap::new(),
            });
            if merged.storage != entry.storage {
                return Err(Error::Inconsistent(format!(
                    "{leaf}: process {p} records {:?}, earlier processes {:?}",
                    entry.storage, merged.storage
                )));
            }
            if merged.sharding != entry.sharding {
                return Err(Error::Inconsistent(format!("{leaf}: process {p} records a different sharding")));
            }
            for name in entry.chunks {
                let location = match &manifest {
                    None => ChunkLocation { process: p, key: join(&rel_dir, &join(&leaf, &name)), offset: None, length: None },
                    Some(m) => {
                        let e = m.lookup(&join(&leaf, &name)).ok_or_else(|| {
                            Error::Inconsistent(format!("{leaf}/{name} listed by process {p} but absent from its manifest"))
                        })?;
                        ChunkLocation { process: p, key: format!("{rel_dir}/d/{}", e.file), offset: Some(e.offset), length: Some(e.length) }
                    }
                };
                if let Some(prev) = merged.chunks.insert(name.clone(), location) {
                    return Err(Error::Inconsistent(format!("{leaf}/{name} written by both process {} and process {p}", prev.process)));
                }
            }
        }
    }
    for (leaf, entry) in &arrays {
        let grid = grid_extent(&entry.storage.global_shape, &entry.storage.write_chunk);
        for name in entry.chunks.keys() {
            let ok = parse_chunk_name(name).is_some_and(|c| c.len() == grid.len() && c.iter().zip(&grid).all(|(i, g)| i < g));
            if !ok {
                return Err(Error::Inconsistent(format!("{leaf}: chunk {name} lies outside the write-chunk grid")));
            }
        }
        let expected = expected_chunk_count(&entry.storage);
        if entry.chunks.len() != expected {
            return Err(Error::Inconsistent(format!("{leaf}: {} of {expected} write chunks present across processes", entry.chunks.len())));
        }
    }
    Ok(MergedIndexDoc { format_version: 1, layout: layout.unwrap_or_default(), process_count, arrays })
}

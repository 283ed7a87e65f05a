//! Chunked n-dimensional array persistence.
//!
//! Arrays are stored as a grid of write chunks aligned to shard boundaries.
//! Each write chunk is recorded with a finer read-chunk grid so later reads
//! can fetch subchunks by byte range instead of whole chunks.
//!
//! Two layouts share the same key scheme under `<ckpt>/process_<i>/`:
//!
//! * per-leaf: one object per write chunk at `<leaf_path>/c.<i0>.<i1>...`
//! * aggregated: chunk payloads appended to data files `d/<file_id>` capped
//!   near a target size, plus a sorted `manifest.json` index.
//!
//! Payloads are raw row-major little-endian bytes without compression.

mod grid;
mod index;
mod read;
mod write;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tree::DType;

pub use grid::{
    choose_chunk_shape, chunk_name, chunk_region, chunks_intersecting, grid_extent, is_contiguous, linear_offset, parse_chunk_name,
    smallest_prime_factor, ChunkGrid,
};
pub use index::{
    merge_process_indices, process_dir, AggregatedManifest, ChunkLocation, ManifestEntry, MergedArrayEntry, MergedIndexDoc,
    ProcessArrayEntry, ProcessIndexDoc, ARRAY_METADATA, MANIFEST, MERGED_INDEX,
};
pub use read::{read_range, ReadStats};
pub use write::{write_array, AggregatedSink, ChunkSink, PerLeafSink};

pub const DEFAULT_TARGET_FILE_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Layout {
    #[default]
    #[serde(rename = "per-leaf")]
    PerLeaf,
    #[serde(rename = "aggregated")]
    Aggregated,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::PerLeaf => "per-leaf",
            Layout::Aggregated => "aggregated",
        })
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "per-leaf" => Ok(Layout::PerLeaf),
            "aggregated" => Ok(Layout::Aggregated),
            other => Err(Error::InvalidOption(format!("unknown layout {other:?}"))),
        }
    }
}

/// Shapes and chunking of one stored array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayStorageMetadata {
    pub global_shape: Vec<usize>,
    pub dtype: DType,
    pub shard_shape: Vec<usize>,
    pub write_chunk: Vec<usize>,
    pub read_chunk: Vec<usize>,
    pub layout: Layout,
}

impl ArrayStorageMetadata {
    pub fn grid(&self) -> ChunkGrid {
        ChunkGrid { write_chunk: self.write_chunk.clone(), read_chunk: self.read_chunk.clone() }
    }

    pub fn num_elements(&self) -> usize {
        self.global_shape.iter().product()
    }

    pub fn write_chunk_bytes(&self) -> usize {
        self.write_chunk.iter().product::<usize>() * self.dtype.width()
    }
}

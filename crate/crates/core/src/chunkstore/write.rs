use std::collections::BTreeSet;

use super::grid::{chunk_name, chunk_region, chunks_intersecting, grid_extent};
use super::index::{AggregatedManifest, ManifestEntry};
use super::{ArrayStorageMetadata, MANIFEST};
use crate::error::{Error, Result};
use crate::sharding::{copy_box, Region};
use crate::storage::Storage;
use crate::tree::join;

/// Destination for the write chunks produced by one process.
pub trait ChunkSink {
    /// Stores one write-chunk payload under `<leaf_path>/<chunk_name>`.
    fn put_chunk(&mut self, leaf_path: &str, chunk: &str, payload: Vec<u8>) -> Result<()>;
    /// Flushes buffered data and writes any index the layout needs.
    fn finish(&mut self) -> Result<()>;
}

/// One object per write chunk.
pub struct PerLeafSink {
    storage: Storage,
    dir: String,
    written: BTreeSet<String>,
}

impl PerLeafSink {
    /// `dir` is the process directory, e.g. `ckpt/process_0`.
    pub fn new(storage: Storage, dir: impl Into<String>) -> Self {
        Self { storage, dir: dir.into(), written: BTreeSet::new() }
    }
}

impl ChunkSink for PerLeafSink {
    fn put_chunk(&mut self, leaf_path: &str, chunk: &str, payload: Vec<u8>) -> Result<()> {
        let rel = join(leaf_path, chunk);
        if !self.written.insert(rel.clone()) {
            return Err(Error::DuplicateChunk(rel));
        }
        self.storage.put(&join(&self.dir, &rel), payload)
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Appends chunk payloads to data files of roughly `target_file_bytes`.
/// A new file starts when the next chunk would push a non-empty file past the target.
pub struct AggregatedSink {
    storage: Storage,
    dir: String,
    target_file_bytes: u64,
    current: Vec<u8>,
    next_file: u64,
    manifest: AggregatedManifest,
    written: BTreeSet<String>,
}

impl AggregatedSink {
    pub fn new(storage: Storage, dir: impl Into<String>, target_file_bytes: u64) -> Self {
        Self {
            storage,
            dir: dir.into(),
            target_file_bytes,
            current: Vec::new(),
            next_file: 0,
            manifest: AggregatedManifest { target_file_bytes, entries: Vec::new() },
            written: BTreeSet::new(),
        }
    }

    fn flush_file(&mut self) -> Result<()> {
        if self.current.is_empty() {
            return Ok(());
        }
        let key = format!("{}/d/{}", self.dir, self.next_file);
        self.storage.put(&key, std::mem::take(&mut self.current))?;
        self.next_file += 1;
        Ok(())
    }

    pub fn files_written(&self) -> u64 {
        self.next_file
    }
}

impl ChunkSink for AggregatedSink {
    fn put_chunk(&mut self, leaf_path: &str, chunk: &str, payload: Vec<u8>) -> Result<()> {
        let rel = join(leaf_path, chunk);
        if !self.written.insert(rel.clone()) {
            return Err(Error::DuplicateChunk(rel));
        }
        if !self.current.is_empty() && (self.current.len() + payload.len()) as u64 > self.target_file_bytes {
            self.flush_file()?;
        }
        self.manifest.entries.push(ManifestEntry {
            key: rel,
            file: self.next_file,
            offset: self.current.len() as u64,
            length: payload.len() as u64,
        });
        self.current.extend_from_slice(&payload);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.flush_file()?;
        self.manifest.entries.sort_by(|a, b| a.key.cmp(&b.key));
        self.storage.put(&join(&self.dir, MANIFEST), self.manifest.to_bytes())
    }
}

/// Splits each region into write chunks and hands them to `sink`.
///
/// Every region must be aligned to the write-chunk grid and its buffer must
/// be the region's elements in row-major order. Returns the chunk names written.
pub fn write_array(
    sink: &mut dyn ChunkSink,
    leaf_path: &str,
    regions: &[(Region, Vec<u8>)],
    meta: &ArrayStorageMetadata,
) -> Result<Vec<String>> {
    let width = meta.dtype.width();
    let wc = &meta.write_chunk;
    let grid = grid_extent(&meta.global_shape, wc);
    let mut names = Vec::new();
    for (region, bytes) in regions {
        if region.rank() != meta.global_shape.len() {
            return Err(Error::Misaligned(format!(
                "{leaf_path}: region rank {} for array rank {}",
                region.rank(),
                meta.global_shape.len()
            )));
        }
        if bytes.len() != region.num_elements() * width {
            return Err(Error::Misaligned(format!(
                "{leaf_path}: {} bytes supplied for region {:?} ({} bytes)",
                bytes.len(),
                region,
                region.num_elements() * width
            )));
        }
        if region.is_empty() && region.rank() > 0 {
            continue;
        }
        for d in 0..region.rank() {
            let aligned_start = region.offset[d] % wc[d] == 0;
            let aligned_end = region.end(d) % wc[d] == 0 || region.end(d) == meta.global_shape[d];
            if !aligned_start || !aligned_end || region.end(d) > meta.global_shape[d] {
                return Err(Error::Misaligned(format!(
                    "{leaf_path}: region {:?} does not align to write chunk {:?} in dim {d}",
                    region, wc
                )));
            }
        }
        for coords in chunks_intersecting(region, wc) {
            debug_assert!(coords.iter().zip(&grid).all(|(c, g)| c < g));
            let chunk = chunk_region(&coords, wc, &meta.global_shape);
            let mut payload = vec![0u8; chunk.num_elements() * width];
            let at: Vec<usize> = chunk.offset.iter().zip(&region.offset).map(|(c, r)| c - r).collect();
            copy_box(bytes, &region.shape, &at, &mut payload, &chunk.shape, &vec![0; chunk.rank()], &chunk.shape, width);
            let name = chunk_name(&coords);
            sink.put_chunk(leaf_path, &name, payload)?;
            names.push(name);
        }
    }
    Ok(names)
}

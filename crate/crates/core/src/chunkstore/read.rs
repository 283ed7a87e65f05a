use serde::Serialize;

use super::grid::{chunk_region, chunks_intersecting, is_contiguous, linear_offset};
use super::index::{ChunkLocation, MergedArrayEntry};
use crate::error::{Error, Result};
use crate::sharding::{copy_box, Region};
use crate::storage::Storage;
use crate::tree::join;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadStats {
    pub bytes_requested: u64,
    pub bytes_loaded: u64,
}

impl ReadStats {
    pub fn add(&mut self, other: ReadStats) {
        self.bytes_requested += other.bytes_requested;
        self.bytes_loaded += other.bytes_loaded;
    }

    pub fn overhead_ratio(&self) -> f64 {
        if self.bytes_requested == 0 {
            return 1.0;
        }
        self.bytes_loaded as f64 / self.bytes_requested as f64
    }
}

fn fetch(storage: &Storage, ckpt: &str, loc: &ChunkLocation, offset: u64, len: u64, whole: u64) -> Result<Vec<u8>> {
    let key = join(ckpt, &loc.key);
    let base = loc.offset.unwrap_or(0);
    let r =
        if loc.offset.is_none() && offset == 0 && len == whole { storage.get(&key) } else { storage.get_range(&key, base + offset, len) };
    let data = r.map_err(|e| match e {
        Error::NotFound(k) => Error::Corruption(format!("missing chunk object {k}")),
        Error::Storage { key, reason } => Error::Corruption(format!("unreadable chunk {key}: {reason}")),
        other => other,
    })?;
    if data.len() as u64 != len {
        return Err(Error::Corruption(format!("chunk {key} returned {} bytes, expected {len}", data.len())));
    }
    Ok(data)
}

/// Reads `region` of the array described by `entry` from the checkpoint at `ckpt`.
///
/// Fetches only the read chunks intersecting the region. A read chunk that is a
/// contiguous span of its write chunk is fetched by byte range; otherwise the
/// whole write chunk is fetched once and sliced.
pub fn read_range(
    storage: &Storage,
    ckpt: &str,
    leaf_path: &str,
    region: &Region,
    entry: &MergedArrayEntry,
) -> Result<(Vec<u8>, ReadStats)> {
    let meta = &entry.storage;
    let width = meta.dtype.width();
    let full = Region::full(&meta.global_shape);
    if region.rank() != full.rank() || !full.contains(region) {
        return Err(Error::InvalidOption(format!("{leaf_path}: region {region:?} outside array of shape {:?}", meta.global_shape)));
    }
    let mut out = vec![0u8; region.num_elements() * width];
    let mut stats = ReadStats { bytes_requested: out.len() as u64, bytes_loaded: 0 };
    if region.is_empty() && region.rank() > 0 {
        return Ok((out, stats));
    }
    for wc_coords in chunks_intersecting(region, &meta.write_chunk) {
        let wc = chunk_region(&wc_coords, &meta.write_chunk, &meta.global_shape);
        let loc = entry
            .locate(&wc_coords)
            .ok_or_else(|| Error::Corruption(format!("{leaf_path}: no index entry for write chunk {wc_coords:?}")))?;
        let wc_bytes = (wc.num_elements() * width) as u64;
        if let Some(len) = loc.length {
            if len != wc_bytes {
                return Err(Error::Corruption(format!("{leaf_path}: chunk {wc_coords:?} indexed with {len} bytes, expected {wc_bytes}")));
            }
        }
        let wanted = region.intersect(&wc).expect("chunk intersects region");
        let mut whole: Option<Vec<u8>> = None;
        let local_want = wanted.relative_to(&wc);
        for rc_coords in chunks_intersecting(&local_want, &meta.read_chunk) {
            let rc = chunk_region(&rc_coords, &meta.read_chunk, &wc.shape);
            let part = local_want.intersect(&rc).expect("read chunk intersects request");
            let dst_at: Vec<usize> = (0..part.rank()).map(|d| part.offset[d] + wc.offset[d] - region.offset[d]).collect();
            if is_contiguous(&rc, &wc.shape) {
                let start = linear_offset(&rc.offset, &wc.shape, width) as u64;
                let len = (rc.num_elements() * width) as u64;
                let data = fetch(storage, ckpt, loc, start, len, wc_bytes)?;
                stats.bytes_loaded += len;
                let src_at = part.relative_to(&rc).offset;
                copy_box(&data, &rc.shape, &src_at, &mut out, &region.shape, &dst_at, &part.shape, width);
            } else {
                if whole.is_none() {
                    whole = Some(fetch(storage, ckpt, loc, 0, wc_bytes, wc_bytes)?);
                    stats.bytes_loaded += wc_bytes;
                }
                let data = whole.as_deref().expect("fetched above");
                copy_box(data, &wc.shape, &part.offset, &mut out, &region.shape, &dst_at, &part.shape, width);
            }
        }
    }
    Ok((out, stats))
}

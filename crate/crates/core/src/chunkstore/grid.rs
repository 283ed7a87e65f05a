use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sharding::Region;
use crate::tree::DType;

/// Write chunks (the unit stored) and read chunks (the unit fetched).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGrid {
    pub write_chunk: Vec<usize>,
    pub read_chunk: Vec<usize>,
}

impl ChunkGrid {
    pub fn new(write_chunk: Vec<usize>, read_chunk: Vec<usize>) -> Result<Self> {
        let g = Self { write_chunk, read_chunk };
        g.check_read_divides_write()?;
        Ok(g)
    }

    fn check_read_divides_write(&self) -> Result<()> {
        if self.write_chunk.len() != self.read_chunk.len() {
            return Err(Error::InvalidChunkGrid(format!(
                "write chunk {:?} and read chunk {:?} differ in rank",
                self.write_chunk, self.read_chunk
            )));
        }
        for (d, (&w, &r)) in self.write_chunk.iter().zip(&self.read_chunk).enumerate() {
            if r == 0 || w == 0 || w % r != 0 {
                return Err(Error::InvalidChunkGrid(format!("read chunk extent {r} does not divide write chunk extent {w} in dim {d}")));
            }
        }
        Ok(())
    }

    /// Also checks that write chunks tile `shard_shape`.
    pub fn validate_for_shard(&self, shard_shape: &[usize]) -> Result<()> {
        self.check_read_divides_write()?;
        if shard_shape.len() != self.write_chunk.len() {
            return Err(Error::InvalidChunkGrid(format!("shard rank {} vs chunk rank {}", shard_shape.len(), self.write_chunk.len())));
        }
        for (d, (&s, &w)) in shard_shape.iter().zip(&self.write_chunk).enumerate() {
            if s % w != 0 {
                return Err(Error::InvalidChunkGrid(format!("write chunk extent {w} does not divide shard extent {s} in dim {d}")));
            }
        }
        Ok(())
    }
}

pub fn smallest_prime_factor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        return 2;
    }
    let mut f = 3;
    while f * f <= n {
        if n.is_multiple_of(f) {
            return f;
        }
        f += 2;
    }
    n
}

/// Picks a read-chunk shape dividing `shard_shape` whose size is at most
/// `target_bytes` where achievable.
///
/// Starting from the full shard, the outermost dimension with extent > 1 is
/// repeatedly divided by its smallest prime factor (halved when even) until
/// the chunk fits. Splitting outer dimensions first keeps every read chunk a
/// contiguous byte span inside its write chunk. If every extent reaches 1 the
/// single-element chunk is returned even when it exceeds the target.
pub fn choose_chunk_shape(shard_shape: &[usize], dtype: DType, target_bytes: u64) -> Vec<usize> {
    let mut shape = shard_shape.to_vec();
    let bytes = |s: &[usize]| s.iter().product::<usize>() as u64 * dtype.width() as u64;
    while bytes(&shape) > target_bytes {
        let Some(d) = shape.iter().position(|&e| e > 1) else { break };
        shape[d] /= smallest_prime_factor(shape[d]);
    }
    shape
}

/// Object name for the write chunk at grid `coords`: `c.<i0>.<i1>...`, or `c` for rank 0.
pub fn chunk_name(coords: &[usize]) -> String {
    let mut s = String::from("c");
    for c in coords {
        s.push('.');
        s.push_str(&c.to_string());
    }
    s
}

pub fn parse_chunk_name(name: &str) -> Option<Vec<usize>> {
    let rest = name.strip_prefix('c')?;
    if rest.is_empty() {
        return Some(vec![]);
    }
    rest.strip_prefix('.')?.split('.').map(|p| p.parse().ok()).collect()
}

/// Number of chunks of extent `chunk` along each dimension of `shape`.
pub fn grid_extent(shape: &[usize], chunk: &[usize]) -> Vec<usize> {
    shape.iter().zip(chunk).map(|(s, c)| s.div_ceil(*c)).collect()
}

/// The chunk at `coords` as a region of the array.
pub fn chunk_region(coords: &[usize], chunk: &[usize], shape: &[usize]) -> Region {
    let offset: Vec<usize> = coords.iter().zip(chunk).map(|(i, c)| i * c).collect();
    let extent = offset.iter().zip(chunk).zip(shape).map(|((o, c), s)| (*c).min(s - o)).collect();
    Region::new(offset, extent)
}

/// Grid coordinates of every chunk of extent `chunk` that intersects `region`, row-major.
pub fn chunks_intersecting(region: &Region, chunk: &[usize]) -> Vec<Vec<usize>> {
    if region.is_empty() {
        return if region.rank() == 0 { vec![vec![]] } else { vec![] };
    }
    let lo: Vec<usize> = region.offset.iter().zip(chunk).map(|(o, c)| o / c).collect();
    let hi: Vec<usize> = (0..region.rank()).map(|d| (region.end(d) - 1) / chunk[d]).collect();
    let mut out = Vec::new();
    let mut cur = lo.clone();
    loop {
        out.push(cur.clone());
        let mut d = region.rank();
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            if cur[d] < hi[d] {
                cur[d] += 1;
                break;
            }
            cur[d] = lo[d];
        }
    }
}

/// True if `sub` (relative to its container) occupies one contiguous span of
/// the row-major container buffer.
pub fn is_contiguous(sub: &Region, container: &[usize]) -> bool {
    let rank = container.len();
    // shape must be (1, .., 1, k, full, .., full)
    let Some(first_partial) = (0..rank).find(|&d| sub.shape[d] != 1) else { return true };
    ((first_partial + 1)..rank).all(|d| sub.shape[d] == container[d] && sub.offset[d] == 0)
}

/// Byte offset of element `at` in a row-major buffer of `shape`.
pub fn linear_offset(at: &[usize], shape: &[usize], width: usize) -> usize {
    let mut off = 0;
    for (i, s) in at.iter().zip(shape) {
        off = off * s + i;
    }
    off * width
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_names() {
        assert_eq!(chunk_name(&[0, 12]), "c.0.12");
        assert_eq!(chunk_name(&[]), "c");
        assert_eq!(parse_chunk_name("c.0.12"), Some(vec![0, 12]));
        assert_eq!(parse_chunk_name("c"), Some(vec![]));
        assert_eq!(parse_chunk_name("c."), None);
        assert_eq!(parse_chunk_name("x.1"), None);
    }

    #[test]
    fn spf() {
        assert_eq!(smallest_prime_factor(12), 2);
        assert_eq!(smallest_prime_factor(15), 3);
        assert_eq!(smallest_prime_factor(49), 7);
        assert_eq!(smallest_prime_factor(13), 13);
    }

    #[test]
    fn grid_validation() {
        assert!(ChunkGrid::new(vec![16, 16], vec![4, 16]).is_ok());
        assert!(ChunkGrid::new(vec![16, 16], vec![3, 16]).is_err());
        let g = ChunkGrid::new(vec![8, 16], vec![8, 16]).unwrap();
        assert!(g.validate_for_shard(&[16, 16]).is_ok());
        assert!(g.validate_for_shard(&[12, 16]).is_err());
    }

    #[test]
    fn contiguity() {
        let c = [4, 6, 8];
        assert!(is_contiguous(&Region::new(vec![1, 0, 0], vec![2, 6, 8]), &c));
        assert!(is_contiguous(&Region::new(vec![1, 2, 0], vec![1, 3, 8]), &c));
        assert!(is_contiguous(&Region::new(vec![1, 2, 3], vec![1, 1, 2]), &c));
        assert!(!is_contiguous(&Region::new(vec![0, 0, 0], vec![2, 3, 8]), &c));
        assert!(!is_contiguous(&Region::new(vec![0, 0, 0], vec![1, 2, 4]), &c));
    }

    #[test]
    fn intersecting_chunks() {
        let r = Region::new(vec![3, 0], vec![6, 4]);
        assert_eq!(chunks_intersecting(&r, &[4, 4]), vec![vec![0, 0], vec![1, 0], vec![2, 0]]);
        assert_eq!(chunks_intersecting(&Region::new(vec![], vec![]), &[]), vec![Vec::<usize>::new()]);
    }
}

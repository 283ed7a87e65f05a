use serde::{Deserialize, Serialize};

/// An n-dimensional box: per-dimension offset and extent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub offset: Vec<usize>,
    pub shape: Vec<usize>,
}

impl Region {
    pub fn new(offset: Vec<usize>, shape: Vec<usize>) -> Self {
        assert_eq!(offset.len(), shape.len(), "region rank mismatch");
        Self { offset, shape }
    }

    pub fn full(shape: &[usize]) -> Self {
        Self { offset: vec![0; shape.len()], shape: shape.to_vec() }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.num_elements() == 0
    }

    pub fn end(&self, dim: usize) -> usize {
        self.offset[dim] + self.shape[dim]
    }

    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let mut offset = Vec::with_capacity(self.rank());
        let mut shape = Vec::with_capacity(self.rank());
        for d in 0..self.rank() {
            let lo = self.offset[d].max(other.offset[d]);
            let hi = self.end(d).min(other.end(d));
            if hi <= lo {
                return None;
            }
            offset.push(lo);
            shape.push(hi - lo);
        }
        Some(Region { offset, shape })
    }

    pub fn contains(&self, other: &Region) -> bool {
        (0..self.rank()).all(|d| other.offset[d] >= self.offset[d] && other.end(d) <= self.end(d))
    }

    /// `self` expressed relative to `origin`'s offset.
    pub fn relative_to(&self, origin: &Region) -> Region {
        Region { offset: self.offset.iter().zip(&origin.offset).map(|(a, b)| a - b).collect(), shape: self.shape.clone() }
    }
}

/// Copies the box `extent` from `src` (of shape `src_shape`, starting at
/// `src_at`) into `dst` (of shape `dst_shape`, starting at `dst_at`).
/// Buffers are row-major with `width`-byte elements.
#[allow(clippy::too_many_arguments)]
pub fn copy_box(
    src: &[u8],
    src_shape: &[usize],
    src_at: &[usize],
    dst: &mut [u8],
    dst_shape: &[usize],
    dst_at: &[usize],
    extent: &[usize],
    width: usize,
) {
    let rank = extent.len();
    if extent.contains(&0) {
        return;
    }
    if rank == 0 {
        dst[..width].copy_from_slice(&src[..width]);
        return;
    }
    let strides = |shape: &[usize]| {
        let mut s = vec![width; rank];
        for d in (0..rank - 1).rev() {
            s[d] = s[d + 1] * shape[d + 1];
        }
        s
    };
    let (ss, ds) = (strides(src_shape), strides(dst_shape));
    let row = extent[rank - 1] * width;
    let mut idx = vec![0usize; rank - 1];
    loop {
        let mut so = src_at[rank - 1] * width;
        let mut doff = dst_at[rank - 1] * width;
        for d in 0..rank - 1 {
            so += (src_at[d] + idx[d]) * ss[d];
            doff += (dst_at[d] + idx[d]) * ds[d];
        }
        dst[doff..doff + row].copy_from_slice(&src[so..so + row]);
        // odometer over the leading dimensions
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extent[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Extracts `region` from a full buffer of shape `shape`.
pub fn extract(src: &[u8], shape: &[usize], region: &Region, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; region.num_elements() * width];
    copy_box(src, shape, &region.offset, &mut out, &region.shape, &vec![0; region.rank()], &region.shape, width);
    out
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SaveOptions;
use crate::chunkstore::{choose_chunk_shape, ArrayStorageMetadata};
use crate::error::{Error, Result};
use crate::sharding::{extract, replica_segments, segment_dim, Region, Sharding, ShardingDescriptor};
use crate::tree::{join, validate_name, Checkpointable, Checkpointables, DType, DenseArray, Leaf, LeafKind};

/// Small leaf stored inside the global metadata document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InlineLeaf {
    pub variant: LeafKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    /// Little-endian element bytes (scalars) or UTF-8 bytes (text), hex encoded.
    pub hex: String,
}

impl InlineLeaf {
    pub fn of(leaf: &Leaf) -> Option<Self> {
        match leaf {
            Leaf::Scalar(s) => Some(Self { variant: LeafKind::Scalar, dtype: Some(s.dtype()), hex: hex::encode(s.bytes()) }),
            Leaf::Text(t) => Some(Self { variant: LeafKind::Text, dtype: None, hex: hex::encode(t.as_bytes()) }),
            _ => None,
        }
    }

    pub fn to_leaf(&self, key: &str) -> Result<Leaf> {
        let bytes = hex::decode(&self.hex).map_err(|e| Error::metadata(key, e))?;
        match (self.variant, self.dtype) {
            (LeafKind::Scalar, Some(dt)) => Ok(Leaf::Scalar(crate::tree::Scalar::from_bytes(dt, bytes)?)),
            (LeafKind::Text, None) => Ok(Leaf::Text(String::from_utf8(bytes).map_err(|e| Error::metadata(key, e))?)),
            _ => Err(Error::metadata(key, format!("malformed inline leaf {:?}", self.variant))),
        }
    }
}

/// How one array is laid out and which regions each process writes.
#[derive(Debug, Clone)]
pub(crate) struct ArrayPlan {
    /// `<checkpointable>/<leaf_path>`
    pub key: String,
    pub meta: ArrayStorageMetadata,
    pub sharding: Option<Sharding>,
    /// Replica segments per shard; 1 unless replica-parallel.
    pub segments: usize,
}

impl ArrayPlan {
    pub fn new(key: String, array: &DenseArray, sharding: Option<&Sharding>, opts: &SaveOptions, process_count: usize) -> Result<Self> {
        let shape = array.shape().to_vec();
        let shard_shape = match sharding {
            Some(s) => {
                if s.global_shape() != shape.as_slice() {
                    return Err(Error::InvalidSharding(format!(
                        "{key}: sharding is for shape {:?}, array has {:?}",
                        s.global_shape(),
                        shape
                    )));
                }
                if s.mesh().process_count() != process_count {
                    return Err(Error::InvalidSharding(format!(
                        "{key}: mesh spans {} processes, runtime has {process_count}",
                        s.mesh().process_count()
                    )));
                }
                s.shard_shape()
            }
            None => shape.clone(),
        };
        let segments = match sharding {
            Some(s) if opts.replica_parallel => s.replica_count(),
            _ => 1,
        };
        let mut write_chunk = shard_shape.clone();
        if segments > 1 {
            if let Some(d) = segment_dim(&shard_shape) {
                let ext = shard_shape[d];
                if ext > 0 {
                    write_chunk[d] = gcd(ext.div_ceil(segments), ext);
                }
            }
        }
        // zero-extent dims never produce chunks; keep the grid well-formed
        for c in &mut write_chunk {
            *c = (*c).max(1);
        }
        let read_chunk = match opts.subchunk_target_bytes {
            Some(t) => choose_chunk_shape(&write_chunk, array.dtype(), t),
            None => write_chunk.clone(),
        };
        Ok(Self {
            key,
            meta: ArrayStorageMetadata {
                global_shape: shape,
                dtype: array.dtype(),
                shard_shape,
                write_chunk,
                read_chunk,
                layout: opts.layout,
            },
            sharding: sharding.cloned(),
            segments,
        })
    }

    /// Regions process `p` writes. Across processes these tile the array exactly once.
    pub fn regions_for(&self, p: usize) -> Vec<Region> {
        let full = Region::full(&self.meta.global_shape);
        if full.num_elements() == 0 {
            return vec![];
        }
        let Some(s) = &self.sharding else {
            return if p == 0 { vec![full] } else { vec![] };
        };
        let mut out = Vec::new();
        for (_, shard) in s.shards_for_process(p) {
            if self.segments > 1 {
                let seg = replica_segments(&shard.region, self.segments, shard.replica_ordinal);
                if seg.num_elements() > 0 {
                    out.push(seg);
                }
            } else if shard.replica_ordinal == 0 {
                out.push(shard.region);
            }
        }
        out
    }

    pub fn descriptor(&self) -> Option<ShardingDescriptor> {
        self.sharding.as_ref().map(Sharding::descriptor)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Host-side copy of the bytes one process writes for one array.
#[derive(Debug, Clone)]
pub(crate) struct ArraySnapshot {
    pub key: String,
    pub meta: ArrayStorageMetadata,
    pub sharding: Option<ShardingDescriptor>,
    pub regions: Vec<(Region, Vec<u8>)>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ProcessSnapshot {
    pub arrays: Vec<ArraySnapshot>,
}

/// Everything decided before any I/O: per-array plans (with a reference to
/// the caller's data), inline leaves and documents.
pub(crate) struct SavePlan<'a> {
    pub arrays: Vec<(ArrayPlan, &'a DenseArray)>,
    pub inline: BTreeMap<String, BTreeMap<String, InlineLeaf>>,
}

impl<'a> SavePlan<'a> {
    pub fn build(items: &'a Checkpointables, opts: &SaveOptions, process_count: usize) -> Result<Self> {
        let mut arrays = Vec::new();
        let mut inline = BTreeMap::new();
        for (name, item) in items {
            validate_name(name)?;
            let Checkpointable::Tree(st) = item else { continue };
            for path in st.shardings.keys() {
                match st.tree.get(path) {
                    Some(Leaf::Array(_)) => {}
                    Some(_) => return Err(Error::InvalidSharding(format!("{name}/{path} is not an array"))),
                    None => return Err(Error::InvalidSharding(format!("sharding given for unknown leaf {name}/{path}"))),
                }
            }
            let mut small = BTreeMap::new();
            for (path, leaf) in st.tree.flatten() {
                match leaf {
                    Leaf::Array(a) => {
                        arrays.push((ArrayPlan::new(join(name, &path), a, st.shardings.get(&path), opts, process_count)?, a));
                    }
                    Leaf::Placeholder(_) => {
                        return Err(Error::InvalidLeaf(format!("{name}/{path} is a placeholder and cannot be saved")));
                    }
                    other => {
                        small.insert(path, InlineLeaf::of(other).expect("scalar or text"));
                    }
                }
            }
            inline.insert(name.clone(), small);
        }
        Ok(Self { arrays, inline })
    }

    /// Deep copies of the regions process `p` writes.
    pub fn snapshot(&self, p: usize) -> ProcessSnapshot {
        let arrays = self
            .arrays
            .iter()
            .map(|(plan, data)| ArraySnapshot {
                key: plan.key.clone(),
                meta: plan.meta.clone(),
                sharding: plan.descriptor(),
                regions: plan
                    .regions_for(p)
                    .into_iter()
                    .map(|r| {
                        let bytes = extract(data.bytes(), data.shape(), &r, data.dtype().width());
                        (r, bytes)
                    })
                    .collect(),
            })
            .collect();
        ProcessSnapshot { arrays }
    }
}

use std::collections::BTreeSet;

use super::{CheckpointMetadata, LoadMode};
use crate::error::{Error, Result};
use crate::save::InlineLeaf;
use crate::sharding::{validate_topology, Mesh, Region, Sharding};
use crate::tree::{join, path_difference, AbstractLeaf, AbstractTree, DType, LeafKind, Tree};

/// One region a process ends up holding for an array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardRead {
    pub process: usize,
    pub region: Region,
    /// `Some(q)`: received from process `q` instead of read from storage.
    pub from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Array { key: String, dtype: DType, global_shape: Vec<usize>, reads: Vec<ShardRead> },
    Inline(InlineLeaf),
    Placeholder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Directive {
    pub path: String,
    pub target: AbstractLeaf,
    pub source: Source,
    /// Element type conversion applied after assembly.
    pub cast: Option<DType>,
}

impl Directive {
    pub fn is_placeholder(&self) -> bool {
        matches!(self.source, Source::Placeholder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadPlan {
    pub name: String,
    pub mode: LoadMode,
    pub broadcast: bool,
    /// Structure of the result.
    pub target: AbstractTree,
    pub directives: Vec<Directive>,
}

impl LoadPlan {
    /// Directives that read data (excludes placeholders).
    pub fn read_directives(&self) -> impl Iterator<Item = &Directive> {
        self.directives.iter().filter(|d| !d.is_placeholder())
    }
}

/// Builds the loading plan for tree checkpointable `name`.
///
/// Without `abstract_tree` the saved structure and shardings are used and the
/// saved topology must match `current_mesh` (or, if none is given, the
/// runtime's process count).
pub fn plan(
    meta: &CheckpointMetadata,
    name: &str,
    abstract_tree: Option<&AbstractTree>,
    mode: LoadMode,
    current_mesh: Option<&Mesh>,
    process_count: usize,
    broadcast: bool,
) -> Result<LoadPlan> {
    let saved = meta.abstract_tree(name)?;
    let target = match abstract_tree {
        None => {
            for (path, leaf) in saved.flatten() {
                let Some(s) = &leaf.sharding else { continue };
                let d = s.descriptor();
                match current_mesh {
                    Some(mesh) => validate_topology(&d, mesh).map_err(|e| at(name, &path, e))?,
                    None => {
                        if s.mesh().process_count() != process_count {
                            return Err(Error::TopologyMismatch(format!(
                                "{name}/{path} was saved across {} processes, runtime has {process_count}",
                                s.mesh().process_count()
                            )));
                        }
                    }
                }
            }
            saved.clone()
        }
        Some(a) => {
            let (only_saved, only_requested) = path_difference(&saved, a);
            if mode == LoadMode::Strict && (!only_saved.is_empty() || !only_requested.is_empty()) {
                return Err(Error::StructureMismatch { missing: only_requested, extra: only_saved });
            }
            a.clone()
        }
    };

    let tree_doc = meta.global.trees.get(name).ok_or_else(|| Error::NotFound(format!("{}/{name}", meta.path)))?;
    let mut directives = Vec::new();
    let mut result_leaves = Vec::new();
    for (path, want) in target.flatten() {
        let Some(have) = saved.get(&path) else {
            let mut t = want.clone();
            t.placeholder = true;
            result_leaves.push((path.clone(), t.clone()));
            directives.push(Directive { path, target: t, source: Source::Placeholder, cast: None });
            continue;
        };
        if want.placeholder {
            result_leaves.push((path.clone(), want.clone()));
            directives.push(Directive { path, target: want.clone(), source: Source::Placeholder, cast: None });
            continue;
        }
        check_compatible(name, &path, have, want)?;
        let source = match have.kind {
            LeafKind::Array => {
                let key = join(name, &path);
                let entry =
                    meta.index.arrays.get(&key).ok_or_else(|| Error::Corruption(format!("merged index has no entry for leaf {key}")))?;
                let global_shape = entry.storage.global_shape.clone();
                let sharding = if abstract_tree.is_some() { want.sharding.clone() } else { have.sharding.clone() };
                if let Some(s) = &sharding {
                    if s.global_shape() != global_shape.as_slice() {
                        return Err(at(
                            name,
                            &path,
                            Error::InvalidSharding(format!("target sharding is for shape {:?}", s.global_shape())),
                        ));
                    }
                    if s.mesh().process_count() != process_count {
                        return Err(at(
                            name,
                            &path,
                            Error::InvalidSharding(format!(
                                "mesh spans {} processes, runtime has {process_count}",
                                s.mesh().process_count()
                            )),
                        ));
                    }
                }
                let reads = match (&sharding, broadcast) {
                    (None, _) => vec![ShardRead { process: 0, region: Region::full(&global_shape), from: None }],
                    (Some(s), false) => direct_reads(s),
                    (Some(s), true) => broadcast_reads(s).map_err(|e| at(name, &path, e))?,
                };
                Source::Array { key, dtype: entry.storage.dtype, global_shape, reads }
            }
            LeafKind::Scalar | LeafKind::Text => {
                let inline = tree_doc
                    .inline
                    .get(&path)
                    .ok_or_else(|| Error::Corruption(format!("global metadata has no value for {name}/{path}")))?;
                Source::Inline(inline.clone())
            }
        };
        let cast = match (want.dtype, have.dtype) {
            (Some(w), Some(h)) if w != h => Some(w),
            _ => None,
        };
        let mut t = want.clone();
        if abstract_tree.is_none() {
            t.sharding = have.sharding.clone();
        }
        result_leaves.push((path.clone(), t.clone()));
        directives.push(Directive { path, target: t, source, cast });
    }
    let target = Tree::unflatten(&target, result_leaves)?;
    Ok(LoadPlan { name: name.to_string(), mode, broadcast, target, directives })
}

fn at(name: &str, path: &str, e: Error) -> Error {
    match e {
        Error::InvalidSharding(m) => Error::InvalidSharding(format!("{name}/{path}: {m}")),
        Error::TopologyMismatch(m) => Error::TopologyMismatch(format!("{name}/{path}: {m}")),
        Error::Cast { reason, .. } => Error::Cast { path: format!("{name}/{path}"), reason },
        other => other,
    }
}

fn check_compatible(name: &str, path: &str, have: &AbstractLeaf, want: &AbstractLeaf) -> Result<()> {
    let err = |reason: String| Error::Cast { path: format!("{name}/{path}"), reason };
    let rank0 = |l: &AbstractLeaf| l.kind == LeafKind::Scalar || l.shape.as_deref() == Some(&[]);
    match (have.kind, want.kind) {
        (LeafKind::Text, LeafKind::Text) => Ok(()),
        (LeafKind::Text, _) | (_, LeafKind::Text) => Err(err(format!("cannot convert {:?} to {:?}", have.kind, want.kind))),
        (LeafKind::Array, LeafKind::Array) => match &want.shape {
            Some(s) if Some(s) != have.shape.as_ref() => {
                Err(err(format!("saved shape {:?} differs from requested {:?}; reshaping is not supported", have.shape, s)))
            }
            _ => Ok(()),
        },
        _ if rank0(have) && rank0(want) => Ok(()),
        _ => Err(err(format!("saved shape {:?} cannot become a {:?} leaf", have.shape, want.kind))),
    }
}

/// Every process reads the distinct regions of its own devices.
fn direct_reads(s: &Sharding) -> Vec<ShardRead> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (pos, shard) in s.shards().into_iter().enumerate() {
        let p = s.mesh().process_at(pos);
        if seen.insert((p, shard.region.clone())) {
            out.push(ShardRead { process: p, region: shard.region, from: None });
        }
    }
    out
}

/// Only processes holding replica-group-0 devices read; others receive copies.
fn broadcast_reads(s: &Sharding) -> Result<Vec<ShardRead>> {
    let mesh = s.mesh();
    let axis = mesh.replica_axis().ok_or_else(|| Error::InvalidMesh("broadcast loading needs a mesh with a replica axis".into()))?;
    let a = mesh.axis_index(axis)?;
    if s.spec().dims().iter().flatten().any(|d| d == axis) {
        return Err(Error::InvalidSharding(format!(
            "array is partitioned over replica axis {axis}, so replica group 0 does not hold a complete copy"
        )));
    }
    let sizes: Vec<usize> = mesh.axes().iter().map(|(_, n)| *n).collect();
    let position = |coords: &[usize]| coords.iter().zip(&sizes).fold(0, |acc, (c, n)| acc * n + c);
    let shards = s.shards();
    let mut seen = BTreeSet::new();
    let mut primary = Vec::new();
    let mut forwarded = Vec::new();
    for (pos, shard) in shards.iter().enumerate() {
        let p = mesh.process_at(pos);
        let mut coords = mesh.coords(pos);
        let group = coords[a];
        coords[a] = 0;
        let source = mesh.process_at(position(&coords));
        if group == 0 {
            if seen.insert((p, shard.region.clone())) {
                primary.push(ShardRead { process: p, region: shard.region.clone(), from: None });
            }
        } else {
            forwarded.push((p, shard.region.clone(), source));
        }
    }
    for (p, region, source) in forwarded {
        if seen.insert((p, region.clone())) {
            primary.push(ShardRead { process: p, region, from: (p != source).then_some(source) });
        }
    }
    Ok(primary)
}

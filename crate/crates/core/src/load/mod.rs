//! Loading: metadata, plan construction and execution.
//!
//! A load first reads only metadata, then builds a [`LoadPlan`] from the
//! saved structure and the caller's abstract tree (if any). Each process
//! then reads the regions its devices need; global arrays are assembled
//! only after every process has delivered its regions.

mod exec;
mod plan;
pub mod safetensors;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread::JoinHandle;

use serde::Serialize;

use crate::chunkstore::{MergedArrayEntry, MergedIndexDoc, ReadStats, MERGED_INDEX};
use crate::coordination::Runtime;
use crate::error::{Error, Result};
use crate::save::{read_finalized, GlobalMetadataDoc, DEFAULT_ITEM};
use crate::sharding::{Mesh, Sharding};
use crate::storage::Storage;
use crate::tree::{
    join, AbstractCheckpointable, AbstractCheckpointables, AbstractTree, Checkpointable, Checkpointables, DocumentHandler, Handler,
    LeafKind, ShardedTree, DOCUMENT_HANDLER, TREE_HANDLER,
};

pub use plan::{plan, Directive, LoadPlan, ShardRead, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// The abstract tree must name exactly the saved leaves.
    #[default]
    Strict,
    /// Load a subset; requested leaves missing from the checkpoint become placeholders.
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayoutChoice {
    /// safetensors if `path` is a single object, native otherwise.
    #[default]
    Auto,
    Native,
    Safetensors,
}

impl FromStr for LayoutChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "native" => Ok(Self::Native),
            "safetensors" => Ok(Self::Safetensors),
            other => Err(Error::InvalidOption(format!("unknown load layout {other:?}"))),
        }
    }
}

impl fmt::Display for LayoutChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Native => "native",
            Self::Safetensors => "safetensors",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub mode: LoadMode,
    pub layout: LayoutChoice,
    /// Read on replica group 0 only and forward to the other groups.
    pub broadcast: bool,
    /// Current topology, checked against the saved one when no abstract tree is given.
    pub mesh: Option<Mesh>,
}

/// Everything about a finalized checkpoint except chunk payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMetadata {
    pub path: String,
    pub global: GlobalMetadataDoc,
    pub index: MergedIndexDoc,
}

impl CheckpointMetadata {
    pub fn tree_names(&self) -> Vec<&str> {
        self.global.checkpointables.iter().filter(|c| c.handler_id == TREE_HANDLER).map(|c| c.name.as_str()).collect()
    }

    /// The tree checkpointable the single-tree functions use.
    pub fn default_tree(&self) -> Result<&str> {
        let names = self.tree_names();
        if names.contains(&DEFAULT_ITEM) {
            return Ok(DEFAULT_ITEM);
        }
        match names.as_slice() {
            [only] => Ok(only),
            [] => Err(Error::NotFound(format!("{}: no tree checkpointable", self.path))),
            _ => Err(Error::InvalidOption(format!("{}: several trees ({}), name one", self.path, names.join(", ")))),
        }
    }

    pub fn array(&self, name: &str, path: &str) -> Option<&MergedArrayEntry> {
        self.index.arrays.get(&join(name, path))
    }

    /// Saved structure with saved shardings attached to array leaves.
    pub fn abstract_tree(&self, name: &str) -> Result<AbstractTree> {
        let doc = self.global.trees.get(name).ok_or_else(|| Error::NotFound(format!("{}/{name}", self.path)))?;
        let skeleton = doc.structure.to_abstract()?;
        skeleton.try_map_leaves(|path, leaf| {
            let mut leaf = leaf.clone();
            if leaf.kind == LeafKind::Array {
                let key = join(name, path);
                let entry =
                    self.index.arrays.get(&key).ok_or_else(|| Error::Corruption(format!("merged index has no entry for leaf {key}")))?;
                leaf.sharding = entry.sharding.as_ref().map(Sharding::from_descriptor).transpose()?;
            }
            Ok(leaf)
        })
    }
}

/// Reads the metadata of the finalized checkpoint at `path`. Never reads chunk data.
pub fn metadata(storage: &Storage, path: &str) -> Result<CheckpointMetadata> {
    let path = path.trim_end_matches('/');
    let Some(global) = read_finalized(storage, path)? else {
        return Err(if storage.exists(path)? { Error::NotFinalized(path.to_string()) } else { Error::NotFound(path.to_string()) });
    };
    let key = join(path, MERGED_INDEX);
    let index = MergedIndexDoc::parse(&key, &storage.get(&key)?)?;
    let meta = CheckpointMetadata { path: path.to_string(), global, index };
    for name in meta.tree_names() {
        meta.abstract_tree(name)?;
    }
    Ok(meta)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub directives: usize,
    pub placeholders: usize,
    /// Storage reads per array leaf path.
    pub per_leaf: BTreeMap<String, ReadStats>,
    pub total: ReadStats,
}

fn resolve_layout(storage: &Storage, path: &str, choice: LayoutChoice) -> Result<LayoutChoice> {
    Ok(match choice {
        LayoutChoice::Auto if storage.head(path)?.is_some() => LayoutChoice::Safetensors,
        LayoutChoice::Auto => LayoutChoice::Native,
        other => other,
    })
}

/// Loads tree checkpointable `name` (default tree if `None`) with a report of the reads.
pub fn load_item(
    runtime: &Runtime,
    path: &str,
    name: Option<&str>,
    abstract_tree: Option<&AbstractTree>,
    opts: &LoadOptions,
) -> Result<(ShardedTree, LoadReport)> {
    let storage = runtime.storage();
    if resolve_layout(storage, path, opts.layout)? == LayoutChoice::Safetensors {
        let tree = safetensors::load_safetensors(storage, path, abstract_tree, opts.mode)?;
        return Ok((ShardedTree::new(tree), LoadReport::default()));
    }
    let meta = runtime.as_coordinator(|| metadata(storage, path))?;
    let name = match name {
        Some(n) => n,
        None => meta.default_tree()?,
    };
    let plan = plan(&meta, name, abstract_tree, opts.mode, opts.mesh.as_ref(), runtime.process_count(), opts.broadcast)?;
    exec::execute(runtime, &meta.path, &plan)
}

/// Loads the default tree of the checkpoint at `path`.
pub fn load(runtime: &Runtime, path: &str, abstract_tree: Option<&AbstractTree>, opts: &LoadOptions) -> Result<ShardedTree> {
    load_item(runtime, path, None, abstract_tree, opts).map(|(t, _)| t)
}

/// [`load`] reading chunk data on replica group 0 only.
pub fn load_with_broadcast(runtime: &Runtime, path: &str, abstract_tree: &AbstractTree, opts: &LoadOptions) -> Result<ShardedTree> {
    let opts = LoadOptions { broadcast: true, ..opts.clone() };
    load(runtime, path, Some(abstract_tree), &opts)
}

/// Loads every checkpointable (or those named in `targets`).
pub fn load_checkpointables(
    runtime: &Runtime,
    path: &str,
    targets: Option<&AbstractCheckpointables>,
    opts: &LoadOptions,
) -> Result<Checkpointables> {
    let storage = runtime.storage();
    let meta = runtime.as_coordinator(|| metadata(storage, path))?;
    let mut out = BTreeMap::new();
    for desc in &meta.global.checkpointables {
        let target = match targets {
            Some(t) => match t.get(&desc.name) {
                Some(a) => Some(a),
                None if opts.mode == LoadMode::Partial => continue,
                None => {
                    return Err(Error::StructureMismatch { missing: vec![], extra: vec![desc.name.clone()] });
                }
            },
            None => None,
        };
        let value = match desc.handler_id.as_str() {
            TREE_HANDLER => {
                let abstract_tree = match target {
                    Some(AbstractCheckpointable::Tree(t)) => Some(t),
                    Some(AbstractCheckpointable::Document) => return Err(Error::UnknownHandler(format!("{} is a tree", desc.name))),
                    None => None,
                };
                let plan = plan(&meta, &desc.name, abstract_tree, opts.mode, opts.mesh.as_ref(), runtime.process_count(), opts.broadcast)?;
                Checkpointable::Tree(exec::execute(runtime, &meta.path, &plan)?.0)
            }
            DOCUMENT_HANDLER => runtime.as_coordinator(|| DocumentHandler.load(target, storage, &join(&meta.path, &desc.name)))?,
            other => return Err(Error::UnknownHandler(other.to_string())),
        };
        out.insert(desc.name.clone(), value);
    }
    if let Some(t) = targets {
        let missing: Vec<String> = t.keys().filter(|k| !out.contains_key(*k)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::StructureMismatch { missing, extra: vec![] });
        }
    }
    Ok(out)
}

/// Background load; see [`load_item`].
pub struct LoadHandle {
    inner: Option<JoinHandle<Result<(ShardedTree, LoadReport)>>>,
}

impl LoadHandle {
    pub fn wait(mut self) -> Result<(ShardedTree, LoadReport)> {
        self.inner.take().expect("joined once").join().unwrap_or_else(|_| Err(Error::Io("load thread panicked".into())))
    }
}

pub fn load_async(runtime: &Runtime, path: &str, abstract_tree: Option<AbstractTree>, opts: &LoadOptions) -> LoadHandle {
    let (runtime, path, opts) = (runtime.clone(), path.to_string(), opts.clone());
    LoadHandle { inner: Some(std::thread::spawn(move || load_item(&runtime, &path, None, abstract_tree.as_ref(), &opts))) }
}

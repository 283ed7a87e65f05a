//! Checkpointables and the handler interface.
//!
//! A checkpoint is a set of named, independently serializable checkpointables.
//! Array trees are handled by the distributed save/load pipelines (handler id
//! [`TREE_HANDLER`]); small JSON documents are handled by [`DocumentHandler`],
//! which the leader writes to `<name>/data.json`.

use std::collections::BTreeMap;

use serde_json::Value;

use super::leaf::{AbstractLeaf, Leaf};
use super::node::Tree;
use crate::error::{Error, Result};
use crate::json;
use crate::sharding::Sharding;
use crate::storage::Storage;

pub const TREE_HANDLER: &str = "tree";
pub const DOCUMENT_HANDLER: &str = "document";

pub type CheckpointTree = Tree<Leaf>;
pub type AbstractTree = Tree<AbstractLeaf>;

/// A concrete tree plus the shardings of its distributed array leaves.
/// Array leaves without an entry are host arrays owned by process 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedTree {
    pub tree: CheckpointTree,
    pub shardings: BTreeMap<String, Sharding>,
}

impl ShardedTree {
    pub fn new(tree: CheckpointTree) -> Self {
        Self { tree, shardings: BTreeMap::new() }
    }

    pub fn with_sharding(mut self, path: impl Into<String>, sharding: Sharding) -> Self {
        self.shardings.insert(path.into(), sharding);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpointable {
    Tree(ShardedTree),
    Document(Value),
}

impl Checkpointable {
    pub fn handler_id(&self) -> &'static str {
        match self {
            Checkpointable::Tree(_) => TREE_HANDLER,
            Checkpointable::Document(_) => DOCUMENT_HANDLER,
        }
    }

    pub fn from_stateful(obj: &dyn StatefulCheckpointable) -> Self {
        Checkpointable::Document(obj.save_state())
    }

    pub fn as_tree(&self) -> Option<&ShardedTree> {
        match self {
            Checkpointable::Tree(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_document(&self) -> Option<&Value> {
        match self {
            Checkpointable::Document(v) => Some(v),
            _ => None,
        }
    }
}

impl From<CheckpointTree> for Checkpointable {
    fn from(t: CheckpointTree) -> Self {
        Checkpointable::Tree(ShardedTree::new(t))
    }
}

impl From<ShardedTree> for Checkpointable {
    fn from(t: ShardedTree) -> Self {
        Checkpointable::Tree(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AbstractCheckpointable {
    Tree(AbstractTree),
    Document,
}

pub type Checkpointables = BTreeMap<String, Checkpointable>;
pub type AbstractCheckpointables = BTreeMap<String, AbstractCheckpointable>;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointableDescriptor {
    pub name: String,
    pub handler_id: String,
}

/// Checkpointable names become directory names.
pub fn validate_name(name: &str) -> Result<()> {
    let reserved = name.starts_with("process_") || name.ends_with(".json") || name == "COMMIT";
    if name.is_empty() || name.contains('/') || name == "." || name == ".." || reserved {
        return Err(Error::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Save, load and metadata over one checkpointable's storage scope.
pub trait Handler: Send + Sync {
    fn id(&self) -> &'static str;
    fn save(&self, value: &Checkpointable, storage: &Storage, scope: &str) -> Result<()>;
    fn load(&self, target: Option<&AbstractCheckpointable>, storage: &Storage, scope: &str) -> Result<Checkpointable>;
    fn metadata(&self, storage: &Storage, scope: &str) -> Result<AbstractCheckpointable>;
}

/// Stores a JSON document as `<scope>/data.json`.
#[derive(Debug, Default, Clone, Copy)]
pub struct DocumentHandler;

impl DocumentHandler {
    fn key(scope: &str) -> String {
        format!("{scope}/data.json")
    }
}

impl Handler for DocumentHandler {
    fn id(&self) -> &'static str {
        DOCUMENT_HANDLER
    }

    fn save(&self, value: &Checkpointable, storage: &Storage, scope: &str) -> Result<()> {
        let doc = value.as_document().ok_or_else(|| Error::UnknownHandler(format!("{} cannot save a tree", DOCUMENT_HANDLER)))?;
        storage.put(&Self::key(scope), json::to_canonical_vec(doc))
    }

    fn load(&self, _target: Option<&AbstractCheckpointable>, storage: &Storage, scope: &str) -> Result<Checkpointable> {
        let key = Self::key(scope);
        let bytes = storage.get(&key)?;
        Ok(Checkpointable::Document(json::from_slice(&key, &bytes)?))
    }

    fn metadata(&self, storage: &Storage, scope: &str) -> Result<AbstractCheckpointable> {
        let key = Self::key(scope);
        if !storage.exists(&key)? {
            return Err(Error::NotFound(key));
        }
        Ok(AbstractCheckpointable::Document)
    }
}

/// Objects that serialize their own state.
pub trait StatefulCheckpointable {
    fn save_state(&self) -> Value;
    fn load_state(&mut self, state: &Value) -> Result<()>;
}

/// Deterministic iterator over `0..len` whose checkpoint is a single index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexIterator {
    len: u64,
    position: u64,
}

impl IndexIterator {
    pub fn new(len: u64) -> Self {
        Self { len, position: 0 }
    }

    pub fn position(&self) -> u64 {
        self.position
    }
}

impl Iterator for IndexIterator {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.position >= self.len {
            return None;
        }
        self.position += 1;
        Some(self.position - 1)
    }
}

impl StatefulCheckpointable for IndexIterator {
    fn save_state(&self) -> Value {
        serde_json::json!({ "index": self.position, "len": self.len })
    }

    fn load_state(&mut self, state: &Value) -> Result<()> {
        let field = |name: &str| {
            state
                .get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::metadata("iterator state", format!("missing integer field {name}")))
        };
        let (index, len) = (field("index")?, field("len")?);
        if index > len {
            return Err(Error::metadata("iterator state", format!("index {index} beyond length {len}")));
        }
        self.position = index;
        self.len = len;
        Ok(())
    }
}

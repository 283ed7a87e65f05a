//! Nested checkpoint trees, their leaves and abstract descriptions.

mod cast;
mod dtype;
mod handler;
mod leaf;
mod node;
mod structure;

use std::collections::BTreeMap;

pub use cast::{cast_bytes, cast_leaf};
pub use dtype::{DType, Element};
pub use handler::{
    validate_name, AbstractCheckpointable, AbstractCheckpointables, AbstractTree, CheckpointTree, Checkpointable, CheckpointableDescriptor,
    Checkpointables, DocumentHandler, Handler, IndexIterator, ShardedTree, StatefulCheckpointable, DOCUMENT_HANDLER, TREE_HANDLER,
};
pub use leaf::{num_elements, AbstractLeaf, DenseArray, Leaf, LeafKind, Scalar};
pub use node::join;
pub use node::{path_difference, Node, NodeKind, Tree};
pub use structure::{abstract_tree_metadata, tree_metadata, ContainerKind, NodeDoc, TreeStructureDoc};

use crate::error::{Error, Result};
use crate::sharding::Sharding;

/// Leaves of `tree` in deterministic depth-first order.
pub fn flatten(tree: &CheckpointTree) -> Vec<(String, &Leaf)> {
    tree.flatten()
}

/// Replaces every leaf by its abstract description, attaching the given shardings.
pub fn abstract_of(tree: &CheckpointTree, shardings: &BTreeMap<String, Sharding>) -> Result<AbstractTree> {
    for path in shardings.keys() {
        match tree.get(path) {
            Some(Leaf::Array(_)) => {}
            Some(_) => return Err(Error::InvalidSharding(format!("leaf {path} is not an array"))),
            None => return Err(Error::InvalidSharding(format!("unknown leaf path {path} in sharding map"))),
        }
    }
    Ok(tree.map_leaves(|path, leaf| {
        let mut a = AbstractLeaf::of(leaf);
        a.sharding = shardings.get(path).cloned();
        a
    }))
}

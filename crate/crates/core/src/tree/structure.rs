//! Tree-structure metadata: container kinds, key names, empty nodes and
//! per-leaf variant/shape/dtype. Never carries element data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dtype::DType;
use super::leaf::{AbstractLeaf, Leaf, LeafKind};
use super::node::{Node, Tree};
use crate::error::{Error, Result};
use crate::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Mapping,
    Sequence,
    Tuple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeDoc {
    Mapping {
        children: BTreeMap<String, NodeDoc>,
    },
    Sequence {
        children: Vec<NodeDoc>,
    },
    Tuple {
        children: Vec<NodeDoc>,
    },
    Empty {
        container: ContainerKind,
    },
    Leaf {
        variant: LeafKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dtype: Option<DType>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeStructureDoc {
    pub root: NodeDoc,
}

fn node_doc<L>(node: &Node<L>, leaf_doc: &dyn Fn(&L) -> Result<NodeDoc>) -> Result<NodeDoc> {
    Ok(match node {
        Node::Mapping(m) if m.is_empty() => NodeDoc::Empty { container: ContainerKind::Mapping },
        Node::Sequence(s) if s.is_empty() => NodeDoc::Empty { container: ContainerKind::Sequence },
        Node::Tuple(s) if s.is_empty() => NodeDoc::Empty { container: ContainerKind::Tuple },
        Node::Mapping(m) => {
            NodeDoc::Mapping { children: m.iter().map(|(k, c)| Ok((k.clone(), node_doc(c, leaf_doc)?))).collect::<Result<_>>()? }
        }
        Node::Sequence(items) => NodeDoc::Sequence { children: items.iter().map(|c| node_doc(c, leaf_doc)).collect::<Result<_>>()? },
        Node::Tuple(items) => NodeDoc::Tuple { children: items.iter().map(|c| node_doc(c, leaf_doc)).collect::<Result<_>>()? },
        Node::Leaf(l) => leaf_doc(l)?,
    })
}

/// Builds the structure document for a concrete tree. Placeholders cannot be saved.
pub fn tree_metadata(tree: &Tree<Leaf>) -> Result<TreeStructureDoc> {
    let leaf_doc = |l: &Leaf| -> Result<NodeDoc> {
        if l.is_placeholder() {
            return Err(Error::InvalidLeaf("placeholder leaves cannot be saved".into()));
        }
        Ok(NodeDoc::Leaf { variant: l.kind(), shape: l.shape(), dtype: l.dtype() })
    };
    Ok(TreeStructureDoc { root: node_doc(tree.root(), &leaf_doc)? })
}

/// Structure document for an abstract tree.
pub fn abstract_tree_metadata(tree: &Tree<AbstractLeaf>) -> TreeStructureDoc {
    let leaf_doc = |l: &AbstractLeaf| -> Result<NodeDoc> { Ok(NodeDoc::Leaf { variant: l.kind, shape: l.shape.clone(), dtype: l.dtype }) };
    TreeStructureDoc { root: node_doc(tree.root(), &leaf_doc).expect("infallible") }
}

fn to_node(doc: &NodeDoc) -> Node<AbstractLeaf> {
    match doc {
        NodeDoc::Mapping { children } => Node::Mapping(children.iter().map(|(k, c)| (k.clone(), to_node(c))).collect()),
        NodeDoc::Sequence { children } => Node::Sequence(children.iter().map(to_node).collect()),
        NodeDoc::Tuple { children } => Node::Tuple(children.iter().map(to_node).collect()),
        NodeDoc::Empty { container } => match container {
            ContainerKind::Mapping => Node::Mapping(BTreeMap::new()),
            ContainerKind::Sequence => Node::Sequence(vec![]),
            ContainerKind::Tuple => Node::Tuple(vec![]),
        },
        NodeDoc::Leaf { variant, shape, dtype } => {
            Node::Leaf(AbstractLeaf { kind: *variant, shape: shape.clone(), dtype: *dtype, sharding: None, placeholder: false })
        }
    }
}

impl TreeStructureDoc {
    pub fn to_bytes(&self) -> Vec<u8> {
        json::to_canonical_vec(self)
    }

    pub fn parse(key: &str, bytes: &[u8]) -> Result<Self> {
        json::from_slice(key, bytes)
    }

    /// Reconstructs the abstract tree the document describes (no shardings).
    pub fn to_abstract(&self) -> Result<Tree<AbstractLeaf>> {
        Tree::new(to_node(&self.root))
    }
}

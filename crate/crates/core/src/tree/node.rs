use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Mapping,
    Sequence,
    Tuple,
    Leaf,
    Empty,
}

/// A node of a nested tree. Mapping keys iterate in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub enum Node<L> {
    Mapping(BTreeMap<String, Node<L>>),
    Sequence(Vec<Node<L>>),
    Tuple(Vec<Node<L>>),
    Leaf(L),
}

impl<L> Node<L> {
    pub fn leaf(value: impl Into<L>) -> Self {
        Node::Leaf(value.into())
    }

    pub fn mapping<K: Into<String>>(entries: impl IntoIterator<Item = (K, Node<L>)>) -> Self {
        Node::Mapping(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn sequence(items: impl IntoIterator<Item = Node<L>>) -> Self {
        Node::Sequence(items.into_iter().collect())
    }

    pub fn tuple(items: impl IntoIterator<Item = Node<L>>) -> Self {
        Node::Tuple(items.into_iter().collect())
    }

    /// `Empty` for containers with no children.
    pub fn kind(&self) -> NodeKind {
        match self {
            Node::Mapping(m) if m.is_empty() => NodeKind::Empty,
            Node::Sequence(s) | Node::Tuple(s) if s.is_empty() => NodeKind::Empty,
            Node::Mapping(_) => NodeKind::Mapping,
            Node::Sequence(_) => NodeKind::Sequence,
            Node::Tuple(_) => NodeKind::Tuple,
            Node::Leaf(_) => NodeKind::Leaf,
        }
    }

    fn walk<'a>(&'a self, prefix: &mut String, out: &mut Vec<(String, &'a L)>) {
        let visit = |key: &str, child: &'a Node<L>, prefix: &mut String, out: &mut Vec<(String, &'a L)>| {
            let len = prefix.len();
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(key);
            child.walk(prefix, out);
            prefix.truncate(len);
        };
        match self {
            Node::Leaf(l) => out.push((prefix.clone(), l)),
            Node::Mapping(m) => {
                for (k, child) in m {
                    visit(k, child, prefix, out);
                }
            }
            Node::Sequence(items) | Node::Tuple(items) => {
                for (i, child) in items.iter().enumerate() {
                    visit(&i.to_string(), child, prefix, out);
                }
            }
        }
    }

    fn try_map<M, F>(&self, prefix: &mut String, f: &mut F) -> Result<Node<M>>
    where
        F: FnMut(&str, &L) -> Result<M>,
    {
        let child_path = |key: &str, prefix: &String| {
            if prefix.is_empty() {
                key.to_string()
            } else {
                format!("{prefix}/{key}")
            }
        };
        Ok(match self {
            Node::Leaf(l) => Node::Leaf(f(prefix, l)?),
            Node::Mapping(m) => {
                let mut out = BTreeMap::new();
                for (k, child) in m {
                    let mut p = child_path(k, prefix);
                    out.insert(k.clone(), child.try_map(&mut p, f)?);
                }
                Node::Mapping(out)
            }
            Node::Sequence(items) | Node::Tuple(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, child) in items.iter().enumerate() {
                    let mut p = child_path(&i.to_string(), prefix);
                    out.push(child.try_map(&mut p, f)?);
                }
                if matches!(self, Node::Tuple(_)) {
                    Node::Tuple(out)
                } else {
                    Node::Sequence(out)
                }
            }
        })
    }

    fn validate(&self, path: &str) -> Result<()> {
        match self {
            Node::Leaf(_) => Ok(()),
            Node::Mapping(m) => {
                for (k, child) in m {
                    if k.is_empty() || k.contains('/') {
                        return Err(Error::InvalidTree(format!("illegal key {k:?} under {path:?}")));
                    }
                    child.validate(&join(path, k))?;
                }
                Ok(())
            }
            Node::Sequence(items) | Node::Tuple(items) => {
                for (i, child) in items.iter().enumerate() {
                    child.validate(&join(path, &i.to_string()))?;
                }
                Ok(())
            }
        }
    }
}

/// `prefix/key`, or `key` when `prefix` is empty.
pub fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}/{key}")
    }
}

/// A nested tree whose root is a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<L> {
    root: Node<L>,
}

impl<L> Tree<L> {
    pub fn new(root: Node<L>) -> Result<Self> {
        if matches!(root, Node::Leaf(_)) {
            return Err(Error::InvalidTree("root must be a container".into()));
        }
        root.validate("")?;
        Ok(Self { root })
    }

    pub fn empty() -> Self {
        Self { root: Node::Mapping(BTreeMap::new()) }
    }

    pub fn root(&self) -> &Node<L> {
        &self.root
    }

    pub fn into_root(self) -> Node<L> {
        self.root
    }

    /// Leaves in depth-first order, mapping keys sorted, sequences by index.
    pub fn flatten(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        self.root.walk(&mut String::new(), &mut out);
        out
    }

    pub fn paths(&self) -> Vec<String> {
        self.flatten().into_iter().map(|(p, _)| p).collect()
    }

    pub fn get(&self, path: &str) -> Option<&L> {
        let mut node = &self.root;
        if path.is_empty() {
            return None;
        }
        for key in path.split('/') {
            node = match node {
                Node::Mapping(m) => m.get(key)?,
                Node::Sequence(items) | Node::Tuple(items) => items.get(key.parse::<usize>().ok()?)?,
                Node::Leaf(_) => return None,
            };
        }
        match node {
            Node::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn try_map_leaves<M>(&self, mut f: impl FnMut(&str, &L) -> Result<M>) -> Result<Tree<M>> {
        Ok(Tree { root: self.root.try_map(&mut String::new(), &mut f)? })
    }

    pub fn map_leaves<M>(&self, mut f: impl FnMut(&str, &L) -> M) -> Tree<M> {
        self.try_map_leaves(|p, l| Ok(f(p, l))).expect("infallible")
    }

    /// Same structure with unit leaves.
    pub fn skeleton(&self) -> Tree<()> {
        self.map_leaves(|_, _| ())
    }

    /// Rebuilds a tree with the structure of `skeleton` from `(path, leaf)` pairs.
    pub fn unflatten<S>(skeleton: &Tree<S>, leaves: impl IntoIterator<Item = (String, L)>) -> Result<Self> {
        let mut by_path: BTreeMap<String, L> = BTreeMap::new();
        for (p, l) in leaves {
            if by_path.insert(p.clone(), l).is_some() {
                return Err(Error::InvalidTree(format!("duplicate leaf path {p}")));
            }
        }
        let tree =
            skeleton.try_map_leaves(|p, _| by_path.remove(p).ok_or_else(|| Error::InvalidTree(format!("no leaf supplied for {p}"))))?;
        if let Some(extra) = by_path.keys().next() {
            return Err(Error::InvalidTree(format!("leaf {extra} does not exist in the skeleton")));
        }
        Ok(tree)
    }

    /// Same container kinds and leaf paths, ignoring leaf values.
    pub fn same_structure<M>(&self, other: &Tree<M>) -> bool {
        fn eq<A, B>(a: &Node<A>, b: &Node<B>) -> bool {
            match (a, b) {
                (Node::Leaf(_), Node::Leaf(_)) => true,
                (Node::Mapping(x), Node::Mapping(y)) => {
                    x.len() == y.len() && x.iter().zip(y.iter()).all(|((ka, va), (kb, vb))| ka == kb && eq(va, vb))
                }
                (Node::Sequence(x), Node::Sequence(y)) | (Node::Tuple(x), Node::Tuple(y)) => {
                    x.len() == y.len() && x.iter().zip(y.iter()).all(|(va, vb)| eq(va, vb))
                }
                _ => false,
            }
        }
        eq(&self.root, &other.root)
    }

    /// Keeps only leaves whose path satisfies `keep`; emptied containers remain as empty nodes.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Tree<L>
    where
        L: Clone,
    {
        fn go<L: Clone>(node: &Node<L>, path: &str, keep: &dyn Fn(&str) -> bool) -> Option<Node<L>> {
            match node {
                Node::Leaf(l) => keep(path).then(|| Node::Leaf(l.clone())),
                Node::Mapping(m) => {
                    Some(Node::Mapping(m.iter().filter_map(|(k, c)| go(c, &join(path, k), keep).map(|n| (k.clone(), n))).collect()))
                }
                // Sequence positions are part of leaf paths, so sequences keep all children.
                Node::Sequence(items) | Node::Tuple(items) => {
                    let kept: Vec<_> = items.iter().enumerate().map(|(i, c)| go(c, &join(path, &i.to_string()), keep)).collect();
                    if kept.iter().all(Option::is_some) {
                        let kids = kept.into_iter().flatten().collect();
                        Some(if matches!(node, Node::Tuple(_)) { Node::Tuple(kids) } else { Node::Sequence(kids) })
                    } else {
                        None
                    }
                }
            }
        }
        Tree { root: go(&self.root, "", &keep).unwrap_or_else(|| Node::Mapping(BTreeMap::new())) }
    }
}

/// Paths present in exactly one of the two trees: `(only_in_left, only_in_right)`.
pub fn path_difference<A, B>(left: &Tree<A>, right: &Tree<B>) -> (Vec<String>, Vec<String>) {
    let l: BTreeSet<String> = left.paths().into_iter().collect();
    let r: BTreeSet<String> = right.paths().into_iter().collect();
    (l.difference(&r).cloned().collect(), r.difference(&l).cloned().collect())
}

use ckpt_core::load::metadata;
use ckpt_core::storage::{with_actor, Actor, Counters, Storage};
use ckpt_core::tree::{join, LeafKind, DOCUMENT_HANDLER};
use ckpt_core::Error;
use serde::Serialize;

use crate::util::{describe_sharding, fmt_shape, table};
use crate::{Outcome, EXIT_OK};

#[derive(Debug, Clone, Serialize)]
pub struct LeafRow {
    pub item: String,
    pub path: String,
    pub kind: String,
    pub shape: Option<Vec<usize>>,
    pub dtype: Option<String>,
    pub sharding: Option<String>,
    pub write_chunk: Option<Vec<usize>>,
    pub read_chunk: Option<Vec<usize>>,
    pub chunks: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub path: String,
    pub format_version: u32,
    pub layout: String,
    pub commit: String,
    pub process_count: usize,
    pub leaves: Vec<LeafRow>,
    pub documents: Vec<String>,
    pub io: Counters,
}

pub fn inspect(storage: &Storage, path: &str) -> Result<InspectReport, Error> {
    let before = storage.counters();
    let meta = with_actor(Actor::Controller, || metadata(storage, path))?;
    let mut leaves = vec![];
    for name in meta.tree_names() {
        let tree = meta.abstract_tree(name)?;
        for (p, leaf) in tree.flatten() {
            let entry = meta.array(name, &p);
            leaves.push(LeafRow {
                item: name.to_string(),
                path: p.clone(),
                kind: match leaf.kind {
                    LeafKind::Array => "array",
                    LeafKind::Scalar => "scalar",
                    LeafKind::Text => "text",
                }
                .to_string(),
                shape: leaf.shape.clone(),
                dtype: leaf.dtype.map(|d| d.to_string()),
                sharding: leaf.sharding.as_ref().map(describe_sharding),
                write_chunk: entry.map(|e| e.storage.write_chunk.clone()),
                read_chunk: entry.map(|e| e.storage.read_chunk.clone()),
                chunks: entry.map(|e| e.chunks.len()),
            });
        }
    }
    let documents =
        meta.global.checkpointables.iter().filter(|c| c.handler_id == DOCUMENT_HANDLER).map(|c| join(&meta.path, &c.name)).collect();
    Ok(InspectReport {
        path: meta.path.clone(),
        format_version: meta.global.format_version,
        layout: meta.global.layout.to_string(),
        commit: format!("{:?}", meta.global.commit).to_lowercase(),
        process_count: meta.global.process_count,
        leaves,
        documents,
        io: storage.counters().since(&before).total,
    })
}

fn opt<T>(v: &Option<T>, f: impl Fn(&T) -> String) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), f)
}

pub fn run(storage: &Storage, path: &str) -> Result<Outcome, Error> {
    let r = inspect(storage, path)?;
    let mut text =
        format!("{} (format {}, layout {}, commit {}, {} processes)\n", r.path, r.format_version, r.layout, r.commit, r.process_count);
    let rows: Vec<Vec<String>> = r
        .leaves
        .iter()
        .map(|l| {
            vec![
                format!("{}/{}", l.item, l.path),
                l.kind.clone(),
                opt(&l.shape, |s| fmt_shape(s)),
                opt(&l.dtype, String::clone),
                opt(&l.sharding, String::clone),
                opt(&l.write_chunk, |s| fmt_shape(s)),
                opt(&l.read_chunk, |s| fmt_shape(s)),
            ]
        })
        .collect();
    text += &table(&["leaf", "kind", "shape", "dtype", "sharding", "write_chunk", "read_chunk"], &rows);
    for d in &r.documents {
        text += &format!("document {d}\n");
    }
    Ok(Outcome::new(&r, text, EXIT_OK))
}

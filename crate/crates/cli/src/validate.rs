use std::collections::{BTreeMap, BTreeSet};

use ckpt_core::chunkstore::{chunk_region, merge_process_indices, parse_chunk_name, MergedIndexDoc, MERGED_INDEX};
use ckpt_core::save::{CommitStyle, GlobalMetadataDoc, COMMIT_FILE, GLOBAL_METADATA};
use ckpt_core::storage::{with_actor, Actor, Counters, Storage};
use ckpt_core::tree::{join, LeafKind, DOCUMENT_HANDLER, TREE_HANDLER};
use ckpt_core::Error;
use serde::Serialize;

use crate::{Outcome, EXIT_FAILURE, EXIT_OK};

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub path: String,
    pub ok: bool,
    pub problems: Vec<String>,
    pub arrays_checked: usize,
    pub chunks_checked: usize,
    pub io: Counters,
}

struct Checker<'a> {
    storage: &'a Storage,
    path: String,
    problems: Vec<String>,
    arrays: usize,
    chunks: usize,
}

impl Checker<'_> {
    fn problem(&mut self, msg: impl Into<String>) {
        self.problems.push(msg.into());
    }

    fn global(&mut self) -> Result<Option<GlobalMetadataDoc>, Error> {
        let key = join(&self.path, GLOBAL_METADATA);
        let doc = match self.storage.get(&key) {
            Ok(b) => match GlobalMetadataDoc::parse(&key, &b) {
                Ok(d) => d,
                Err(e) => {
                    self.problem(e.to_string());
                    return Ok(None);
                }
            },
            Err(Error::NotFound(_)) => {
                self.problem(format!("not finalized: {key} is missing"));
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        if doc.commit == CommitStyle::Indicator && !self.storage.exists(&join(&self.path, COMMIT_FILE))? {
            self.problem(format!("not finalized: {} is missing", join(&self.path, COMMIT_FILE)));
        }
        Ok(Some(doc))
    }

    fn index(&mut self) -> Result<Option<MergedIndexDoc>, Error> {
        let key = join(&self.path, MERGED_INDEX);
        match self.storage.get(&key) {
            Ok(b) => match MergedIndexDoc::parse(&key, &b) {
                Ok(d) => Ok(Some(d)),
                Err(e) => {
                    self.problem(e.to_string());
                    Ok(None)
                }
            },
            Err(Error::NotFound(_)) => {
                self.problem(format!("{key} is missing"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn coverage(&mut self, global: &GlobalMetadataDoc, index: &MergedIndexDoc) -> Result<(), Error> {
        let mut expected = BTreeSet::new();
        for c in &global.checkpointables {
            match c.handler_id.as_str() {
                TREE_HANDLER => {
                    let Some(doc) = global.trees.get(&c.name) else {
                        self.problem(format!("no structure recorded for tree {}", c.name));
                        continue;
                    };
                    let tree = match doc.structure.to_abstract() {
                        Ok(t) => t,
                        Err(e) => {
                            self.problem(format!("{}: {e}", c.name));
                            continue;
                        }
                    };
                    for (p, leaf) in tree.flatten() {
                        if leaf.kind == LeafKind::Array {
                            expected.insert(join(&c.name, &p));
                        }
                    }
                }
                DOCUMENT_HANDLER => {
                    let key = join(&join(&self.path, &c.name), "data.json");
                    if !self.storage.exists(&key)? {
                        self.problem(format!("document {key} is missing"));
                    }
                }
                other => self.problem(format!("{}: unknown handler {other}", c.name)),
            }
        }
        let present: BTreeSet<String> = index.arrays.keys().cloned().collect();
        for k in expected.difference(&present) {
            self.problem(format!("merged index has no entry for leaf {k}"));
        }
        for k in present.difference(&expected) {
            self.problem(format!("merged index lists {k}, which no tree contains"));
        }
        Ok(())
    }

    fn agreement(&mut self, global: &GlobalMetadataDoc, index: &MergedIndexDoc) -> Result<(), Error> {
        match merge_process_indices(self.storage, &self.path, global.process_count) {
            Ok(merged) => {
                let keys: BTreeSet<&String> = merged.arrays.keys().chain(index.arrays.keys()).collect();
                for k in keys {
                    if merged.arrays.get(k) != index.arrays.get(k) {
                        self.problem(format!("{k}: merged index disagrees with per-process metadata"));
                    }
                }
                Ok(())
            }
            Err(e @ (Error::Inconsistent(_) | Error::Corruption(_) | Error::Metadata { .. } | Error::NotFound(_))) => {
                self.problem(e.to_string());
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn chunks(&mut self, index: &MergedIndexDoc) -> Result<(), Error> {
        let mut sizes: BTreeMap<String, Option<u64>> = BTreeMap::new();
        for (leaf, entry) in &index.arrays {
            self.arrays += 1;
            let width = entry.storage.dtype.width() as u64;
            for (name, loc) in &entry.chunks {
                self.chunks += 1;
                let Some(coords) = parse_chunk_name(name) else {
                    self.problem(format!("{leaf}: bad chunk name {name}"));
                    continue;
                };
                let expected = chunk_region(&coords, &entry.storage.write_chunk, &entry.storage.global_shape).num_elements() as u64 * width;
                let key = join(&self.path, &loc.key);
                let size = match sizes.get(&key) {
                    Some(s) => *s,
                    None => {
                        let s = self.storage.head(&key)?;
                        sizes.insert(key.clone(), s);
                        s
                    }
                };
                match (size, loc.offset, loc.length) {
                    (None, ..) => self.problem(format!("missing chunk object {key} ({leaf}/{name})")),
                    (Some(n), None, _) if n != expected => self.problem(format!("chunk {key} has {n} bytes, expected {expected}")),
                    (Some(n), Some(off), Some(len)) => {
                        if len != expected {
                            self.problem(format!("{leaf}/{name}: manifest length {len}, expected {expected}"));
                        } else if off + len > n {
                            self.problem(format!("data file {key} has {n} bytes; {leaf}/{name} ends at {}", off + len));
                        }
                    }
                    (Some(_), Some(_), None) => self.problem(format!("{leaf}/{name}: offset without length")),
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Checks commit marker, index coverage, per-process agreement and chunk
/// objects (by size). Reads metadata documents only.
pub fn validate_checkpoint(storage: &Storage, path: &str) -> Result<ValidateReport, Error> {
    let path = path.trim_end_matches('/').to_string();
    let before = storage.counters();
    with_actor(Actor::Controller, || {
        if !storage.exists(&path)? {
            return Err(Error::NotFound(path.clone()));
        }
        let mut c = Checker { storage, path: path.clone(), problems: vec![], arrays: 0, chunks: 0 };
        if let Some(global) = c.global()? {
            if let Some(index) = c.index()? {
                c.coverage(&global, &index)?;
                c.agreement(&global, &index)?;
                c.chunks(&index)?;
            }
        }
        Ok(ValidateReport {
            path: path.clone(),
            ok: c.problems.is_empty(),
            problems: c.problems,
            arrays_checked: c.arrays,
            chunks_checked: c.chunks,
            io: storage.counters().since(&before).total,
        })
    })
}

pub fn run(storage: &Storage, path: &str) -> Result<Outcome, Error> {
    let r = validate_checkpoint(storage, path)?;
    let mut text = String::new();
    for p in &r.problems {
        text += &format!("problem: {p}\n");
    }
    text += &format!(
        "{}: {} ({} arrays, {} chunks checked)\n",
        r.path,
        if r.ok { "ok" } else { "invalid" },
        r.arrays_checked,
        r.chunks_checked
    );
    let code = if r.ok { EXIT_OK } else { EXIT_FAILURE };
    Ok(Outcome::new(&r, text, code))
}

//! The save protocol.
//!
//! A save runs in two phases. The synchronous phase validates the request,
//! checks that no finalized checkpoint occupies the path, lets the leader
//! create the temporary directory and snapshots every process's bytes. The
//! background phase writes global metadata (leader), per-process chunks and
//! metadata (all), then merges and commits (leader).
//!
//! Commit happens by renaming `<path>.tmp.<nonce>` to `<path>` on storage
//! that supports atomic renames; otherwise data is written in place and a
//! `COMMIT` file is written last.

mod handle;
mod plan;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::chunkstore::{
    merge_process_indices, process_dir, write_array, AggregatedSink, ChunkSink, Layout, PerLeafSink, ProcessArrayEntry, ProcessIndexDoc,
    ARRAY_METADATA, DEFAULT_TARGET_FILE_BYTES, MERGED_INDEX,
};
use crate::coordination::{Mode, ProcessCtx, Runtime};
use crate::error::{Error, Result};
use crate::json;
use crate::storage::Storage;
use crate::tree::{
    join, tree_metadata, Checkpointable, CheckpointableDescriptor, Checkpointables, DocumentHandler, Handler, TreeStructureDoc,
};

pub use handle::{CompletionCallback, SaveHandle, SavePhase};
pub use plan::InlineLeaf;
use plan::{ProcessSnapshot, SavePlan};

pub const GLOBAL_METADATA: &str = "global_metadata.json";
pub const COMMIT_FILE: &str = "COMMIT";
pub const FORMAT_VERSION: u32 = 1;
/// Default read-subchunk target.
pub const DEFAULT_SUBCHUNK_TARGET_BYTES: u64 = 32 << 20;
/// Checkpointable name used by the single-tree convenience functions.
pub const DEFAULT_ITEM: &str = "state";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaveOptions {
    pub layout: Layout,
    /// `None` stores read chunks equal to write chunks.
    pub subchunk_target_bytes: Option<u64>,
    pub replica_parallel: bool,
    /// Return after the synchronous phase instead of after commit.
    pub async_save: bool,
    pub target_file_bytes: u64,
    /// Keep the temporary directory when a save fails.
    pub retain_temp_on_failure: bool,
    #[doc(hidden)]
    pub skip_existence_barrier: bool,
}

impl Default for SaveOptions {
    fn default() -> Self {
        Self {
            layout: Layout::PerLeaf,
            subchunk_target_bytes: Some(DEFAULT_SUBCHUNK_TARGET_BYTES),
            replica_parallel: false,
            async_save: true,
            target_file_bytes: DEFAULT_TARGET_FILE_BYTES,
            retain_temp_on_failure: false,
            skip_existence_barrier: false,
        }
    }
}

impl SaveOptions {
    pub fn sync() -> Self {
        Self { async_save: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitStyle {
    Rename,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDoc {
    pub structure: TreeStructureDoc,
    /// Scalars and text, by leaf path.
    pub inline: BTreeMap<String, InlineLeaf>,
}

/// `global_metadata.json`, written once by the leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMetadataDoc {
    pub format_version: u32,
    pub commit: CommitStyle,
    pub layout: Layout,
    pub process_count: usize,
    pub checkpointables: Vec<CheckpointableDescriptor>,
    pub trees: BTreeMap<String, TreeDoc>,
}

impl GlobalMetadataDoc {
    pub fn to_bytes(&self) -> Vec<u8> {
        json::to_canonical_vec(self)
    }

    pub fn parse(key: &str, bytes: &[u8]) -> Result<Self> {
        let doc: Self = json::from_slice(key, bytes)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::metadata(key, format!("unsupported format version {}", doc.format_version)));
        }
        Ok(doc)
    }
}

/// Reads the global metadata of a finalized checkpoint; `Ok(None)` if there
/// is no finalized checkpoint at `path`.
pub fn read_finalized(storage: &Storage, path: &str) -> Result<Option<GlobalMetadataDoc>> {
    let key = join(path, GLOBAL_METADATA);
    let bytes = match storage.get(&key) {
        Ok(b) => b,
        Err(Error::NotFound(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let doc = GlobalMetadataDoc::parse(&key, &bytes)?;
    if doc.commit == CommitStyle::Indicator && !storage.exists(&join(path, COMMIT_FILE))? {
        return Ok(None);
    }
    Ok(Some(doc))
}

pub fn is_finalized(storage: &Storage, path: &str) -> Result<bool> {
    Ok(read_finalized(storage, path)?.is_some())
}

static NONCE: AtomicU64 = AtomicU64::new(0);

pub fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// `<path>.tmp.<unix_millis>-<pid>-<seq>`
fn temp_name(path: &str) -> String {
    let seq = NONCE.fetch_add(1, Ordering::Relaxed);
    format!("{path}.tmp.{}-{}-{seq}", unix_millis(), std::process::id())
}

/// Creation time recorded in a temporary directory name.
pub fn temp_created_millis(name: &str) -> Option<u64> {
    let (_, nonce) = name.rsplit_once(".tmp.")?;
    nonce.split('-').next()?.parse().ok()
}

/// Per-save shared state used for cleanup decisions.
#[derive(Default)]
struct Progress {
    temp: Mutex<Option<String>>,
    committed: AtomicBool,
    retain: AtomicBool,
}

struct Session {
    runtime: Runtime,
    path: String,
    op: u64,
    style: CommitStyle,
    opts: SaveOptions,
    global: GlobalMetadataDoc,
    documents: BTreeMap<String, serde_json::Value>,
    progress: Arc<Progress>,
    phase: Arc<Mutex<SavePhase>>,
}

impl Session {
    fn barrier(&self, ctx: &ProcessCtx, phase: &str) -> Result<()> {
        ctx.barrier(&format!("{}/op{}/{phase}", self.path, self.op))
    }

    fn set_phase(&self, p: SavePhase) {
        handle::advance(&self.phase, p);
    }

    fn storage(&self) -> &Storage {
        self.runtime.storage()
    }

    /// Existence check run by every process (or the controller).
    fn check_existing(&self) -> Result<bool> {
        let storage = self.storage();
        let existed = storage.exists(&self.path)?;
        self.runtime.record_event("existence_check", format!("{} existed={existed}", self.path));
        if existed && is_finalized(storage, &self.path)? {
            return Err(Error::AlreadyExists(self.path.clone()));
        }
        Ok(existed)
    }

    /// Leader: clears stale unfinalized content and creates the write target.
    fn create_target(&self, stale: bool) -> Result<String> {
        let storage = self.storage();
        if stale {
            storage.delete_prefix(&self.path)?;
        }
        let temp = match self.style {
            CommitStyle::Rename => temp_name(&self.path),
            CommitStyle::Indicator => self.path.clone(),
        };
        *self.progress.temp.lock().unwrap() = Some(temp.clone());
        storage.create_dir(&temp)?;
        self.runtime.note_action("create_dir");
        self.runtime.record_event("temp_created", temp.clone());
        Ok(temp)
    }

    fn write_global(&self, temp: &str) -> Result<()> {
        let storage = self.storage();
        storage.put(&join(temp, GLOBAL_METADATA), self.global.to_bytes())?;
        for (name, doc) in &self.documents {
            DocumentHandler.save(&Checkpointable::Document(doc.clone()), storage, &join(temp, name))?;
        }
        self.runtime.note_action("write_global_metadata");
        Ok(())
    }

    fn finalize(&self, temp: &str) -> Result<()> {
        self.set_phase(SavePhase::Merging);
        let storage = self.storage();
        let merged = merge_process_indices(storage, temp, self.runtime.process_count())?;
        storage.put(&join(temp, MERGED_INDEX), merged.to_bytes())?;
        self.runtime.note_action("merge");
        match self.style {
            CommitStyle::Rename => {
                if let Err(e) = storage.rename(temp, &self.path) {
                    self.progress.retain.store(true, Ordering::SeqCst);
                    return Err(e);
                }
            }
            CommitStyle::Indicator => storage.put(&join(temp, COMMIT_FILE), b"")?,
        }
        self.progress.committed.store(true, Ordering::SeqCst);
        self.runtime.note_action("commit");
        self.runtime.record_event("committed", self.path.clone());
        Ok(())
    }

    /// Best-effort removal of an uncommitted target after a failure.
    fn cleanup(&self) {
        if self.opts.retain_temp_on_failure || self.progress.retain.load(Ordering::SeqCst) || self.progress.committed.load(Ordering::SeqCst)
        {
            return;
        }
        if let Some(temp) = self.progress.temp.lock().unwrap().clone() {
            let _ = self.runtime.as_coordinator(|| self.storage().delete_prefix(&temp));
        }
    }

    /// Background phase: writes, merge, commit.
    fn run_async(&self, temp: &str, snapshots: Vec<ProcessSnapshot>) -> Result<()> {
        self.set_phase(SavePhase::Writing);
        match self.runtime.mode() {
            Mode::MultiController => {
                let slots: Vec<Mutex<Option<ProcessSnapshot>>> = snapshots.into_iter().map(|s| Mutex::new(Some(s))).collect();
                self.runtime.run_all(|ctx| {
                    let snap = slots[ctx.index()].lock().unwrap().take().unwrap_or_default();
                    if ctx.is_leader() {
                        self.write_global(temp)?;
                    }
                    ctx.schedule_point();
                    write_phase(self.storage(), temp, ctx.index(), &self.opts, snap)?;
                    self.barrier(ctx, "written")?;
                    if ctx.is_leader() {
                        self.finalize(temp)?;
                    }
                    self.barrier(ctx, "finalized")
                })?;
            }
            Mode::SingleController => {
                self.runtime.as_controller(|| self.write_global(temp))?;
                let workers: Vec<usize> = (0..self.runtime.process_count()).collect();
                let slots: Vec<Mutex<Option<ProcessSnapshot>>> = snapshots.into_iter().map(|s| Mutex::new(Some(s))).collect();
                self.runtime.run_on_workers(&workers, |w| {
                    let snap = slots[w].lock().unwrap().take().unwrap_or_default();
                    write_phase(self.storage(), temp, w, &self.opts, snap)
                })?;
                self.runtime.as_controller(|| self.finalize(temp))?;
            }
        }
        Ok(())
    }
}

/// Writes one process's snapshot under `<temp>/process_<p>/` together with
/// its `array_metadata.json` (and manifest for the aggregated layout).
pub(crate) fn write_phase(storage: &Storage, temp: &str, p: usize, opts: &SaveOptions, snap: ProcessSnapshot) -> Result<ProcessIndexDoc> {
    let dir = process_dir(temp, p);
    let mut sink: Box<dyn ChunkSink> = match opts.layout {
        Layout::PerLeaf => Box::new(PerLeafSink::new(storage.clone(), dir.clone())),
        Layout::Aggregated => Box::new(AggregatedSink::new(storage.clone(), dir.clone(), opts.target_file_bytes)),
    };
    let mut arrays = BTreeMap::new();
    for a in snap.arrays {
        let chunks = write_array(sink.as_mut(), &a.key, &a.regions, &a.meta)?;
        arrays.insert(a.key, ProcessArrayEntry { storage: a.meta, sharding: a.sharding, chunks });
    }
    sink.finish()?;
    let doc = ProcessIndexDoc { process: p, layout: opts.layout, arrays };
    storage.put(&join(&dir, ARRAY_METADATA), doc.to_bytes())?;
    Ok(doc)
}

/// Saves `items` to `path`.
///
/// Returns once validation and the snapshot are complete (or, without
/// `async_save`, once the checkpoint is committed). The caller may mutate
/// `items` as soon as this returns.
pub fn save(runtime: &Runtime, path: &str, items: &Checkpointables, opts: &SaveOptions) -> Result<SaveHandle> {
    save_with_callback(runtime, path, items, opts, None)
}

/// [`save`] for a single tree stored as the [`DEFAULT_ITEM`] checkpointable.
pub fn save_tree(runtime: &Runtime, path: &str, tree: impl Into<Checkpointable>, opts: &SaveOptions) -> Result<SaveHandle> {
    save(runtime, path, &BTreeMap::from([(DEFAULT_ITEM.to_string(), tree.into())]), opts)
}

/// [`save`] with a callback run once the background phase ends.
pub fn save_with_callback(
    runtime: &Runtime,
    path: &str,
    items: &Checkpointables,
    opts: &SaveOptions,
    on_complete: Option<CompletionCallback>,
) -> Result<SaveHandle> {
    let path = path.trim_end_matches('/').to_string();
    if path.is_empty() {
        return Err(Error::InvalidOption("empty checkpoint path".into()));
    }
    let phase = Arc::new(Mutex::new(SavePhase::Validating));
    let storage = runtime.storage();
    let style = if storage.supports_atomic_rename() { CommitStyle::Rename } else { CommitStyle::Indicator };

    let plan = SavePlan::build(items, opts, runtime.process_count())?;
    let mut trees = BTreeMap::new();
    let mut documents = BTreeMap::new();
    let mut descriptors = Vec::new();
    for (name, item) in items {
        descriptors.push(CheckpointableDescriptor { name: name.clone(), handler_id: item.handler_id().to_string() });
        match item {
            Checkpointable::Tree(st) => {
                let inline = plan.inline.get(name).cloned().unwrap_or_default();
                trees.insert(name.clone(), TreeDoc { structure: tree_metadata(&st.tree)?, inline });
            }
            Checkpointable::Document(v) => {
                documents.insert(name.clone(), v.clone());
            }
        }
    }
    let session = Arc::new(Session {
        runtime: runtime.clone(),
        path: path.clone(),
        op: runtime.next_op_id(),
        style,
        opts: opts.clone(),
        global: GlobalMetadataDoc {
            format_version: FORMAT_VERSION,
            commit: style,
            layout: opts.layout,
            process_count: runtime.process_count(),
            checkpointables: descriptors,
            trees,
        },
        documents,
        progress: Arc::default(),
        phase: phase.clone(),
    });

    let sync = sync_phase(&session, &plan);
    let (temp, snapshots) = match sync {
        Ok(v) => v,
        Err(e) => {
            handle::advance(&phase, SavePhase::Failed);
            session.cleanup();
            if let Some(cb) = on_complete {
                cb(&Err(e.clone()));
            }
            return Err(e);
        }
    };
    drop(plan);
    handle::advance(&phase, SavePhase::Snapshotted);

    let job = move || {
        let r = session.run_async(&temp, snapshots);
        match &r {
            Ok(()) => session.set_phase(SavePhase::Finalized),
            Err(_) => {
                session.set_phase(SavePhase::Failed);
                session.cleanup();
            }
        }
        if let Some(cb) = on_complete {
            cb(&r);
        }
        r
    };
    if opts.async_save {
        Ok(SaveHandle::spawn(path, phase, job))
    } else {
        job()?;
        Ok(SaveHandle::completed(path, phase))
    }
}

/// Validation, existence check, target creation and snapshot.
fn sync_phase(s: &Session, plan: &SavePlan<'_>) -> Result<(String, Vec<ProcessSnapshot>)> {
    let rt = &s.runtime;
    match rt.mode() {
        Mode::MultiController => {
            let out = rt.run_all(|ctx| {
                ctx.schedule_point();
                let existed = s.check_existing()?;
                if !s.opts.skip_existence_barrier {
                    s.barrier(ctx, "existence_checked")?;
                }
                let temp = if ctx.is_leader() {
                    let t = s.create_target(existed)?;
                    ctx.broadcast(Some(t.into_bytes()))?
                } else {
                    ctx.broadcast(None)?
                };
                let temp = String::from_utf8(temp).map_err(|e| Error::Io(e.to_string()))?;
                s.barrier(ctx, "dir_created")?;
                Ok((temp, plan.snapshot(ctx.index())))
            })?;
            let temp = out[0].0.clone();
            Ok((temp, out.into_iter().map(|(_, snap)| snap).collect()))
        }
        Mode::SingleController => {
            let temp = rt.as_controller(|| {
                let existed = s.check_existing()?;
                s.create_target(existed)
            })?;
            let workers: Vec<usize> = (0..rt.process_count()).collect();
            let snapshots = rt.run_on_workers(&workers, |w| Ok(plan.snapshot(w)))?;
            Ok((temp, snapshots))
        }
    }
}

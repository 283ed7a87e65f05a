//! Key-value storage with exact I/O accounting and fault injection.
//!
//! [`Backend`] is the raw store. [`Storage`] wraps one and adds
//!
//! * per-operation and per-actor byte/op counters, split into chunk payload
//!   and metadata traffic,
//! * a "crash after operation k" fault plan and per-key write failures,
//! * a gate that blocks chunk payload writes until released,
//! * an optional trace of every operation.
//!
//! The acting identity (simulated process, controller) is thread-local; the
//! coordination runtime sets it on every execution context it starts.

mod fs;
mod memory;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use serde::Serialize;

use crate::error::{Error, Result};

pub use self::fs::FsBackend;
pub use self::memory::MemoryBackend;

pub trait Backend: Send + Sync {
    /// Atomic per key.
    fn put(&self, key: &str, data: &[u8]) -> Result<()>;
    fn get(&self, key: &str) -> Result<Vec<u8>>;
    fn get_range(&self, key: &str, offset: u64, len: u64) -> Result<Vec<u8>>;
    /// Object size, `None` if absent.
    fn head(&self, key: &str) -> Result<Option<u64>>;
    /// All object keys below the directory `prefix` (recursive), sorted.
    fn list(&self, prefix: &str) -> Result<Vec<String>>;
    fn delete(&self, key: &str) -> Result<()>;
    fn delete_prefix(&self, prefix: &str) -> Result<()>;
    /// Moves the directory `src` to `dst`; fails if `dst` exists.
    fn rename(&self, src: &str, dst: &str) -> Result<()>;
    fn create_dir(&self, prefix: &str) -> Result<()>;
    /// True if `path` is an object or a non-empty/created directory.
    fn exists(&self, path: &str) -> Result<bool>;
    fn supports_atomic_rename(&self) -> bool;
}

/// `key` lies strictly below directory `prefix`.
pub(crate) fn under(key: &str, prefix: &str) -> bool {
    prefix.is_empty() || (key.len() > prefix.len() && key.starts_with(prefix) && key.as_bytes()[prefix.len()] == b'/')
}

/// Chunk payload objects: `.../c.<i0>.<i1>...` (or `.../c` for rank 0), and
/// aggregated data files `process_<i>/d/<file_id>`.
pub fn is_payload_key(key: &str) -> bool {
    let mut parts = key.rsplit('/');
    let last = parts.next().unwrap_or("");
    if let Some(coords) = last.strip_prefix('c') {
        if coords.is_empty()
            || (coords.starts_with('.') && coords[1..].split('.').all(|c| !c.is_empty() && c.bytes().all(|b| b.is_ascii_digit())))
        {
            return true;
        }
    }
    let is_file_id = !last.is_empty() && last.bytes().all(|b| b.is_ascii_digit());
    is_file_id && parts.next() == Some("d") && parts.next().is_some_and(|p| p.starts_with("process_"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Actor {
    /// Caller threads outside any simulated process.
    Host,
    Controller,
    Process(usize),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Host => f.write_str("host"),
            Actor::Controller => f.write_str("controller"),
            Actor::Process(p) => write!(f, "process_{p}"),
        }
    }
}

impl Serialize for Actor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

thread_local! {
    static ACTOR: Cell<Actor> = const { Cell::new(Actor::Host) };
}

pub fn current_actor() -> Actor {
    ACTOR.with(Cell::get)
}

pub fn set_actor(actor: Actor) {
    ACTOR.with(|a| a.set(actor));
}

/// Runs `f` with the thread's actor set to `actor`, restoring it afterwards.
pub fn with_actor<R>(actor: Actor, f: impl FnOnce() -> R) -> R {
    let prev = current_actor();
    set_actor(actor);
    let out = f();
    set_actor(prev);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Put,
    Get,
    GetRange,
    Head,
    List,
    Delete,
    DeletePrefix,
    Rename,
    CreateDir,
    Exists,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub ops: BTreeMap<OpKind, u64>,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub payload_bytes_read: u64,
    pub payload_bytes_written: u64,
}

impl Counters {
    pub fn op(&self, kind: OpKind) -> u64 {
        self.ops.get(&kind).copied().unwrap_or(0)
    }

    pub fn total_ops(&self) -> u64 {
        self.ops.values().sum()
    }

    /// Field-wise `self - earlier`.
    pub fn since(&self, earlier: &Counters) -> Counters {
        let mut ops = BTreeMap::new();
        for (k, v) in &self.ops {
            let d = v - earlier.op(*k);
            if d > 0 {
                ops.insert(*k, d);
            }
        }
        Counters {
            ops,
            bytes_read: self.bytes_read - earlier.bytes_read,
            bytes_written: self.bytes_written - earlier.bytes_written,
            payload_bytes_read: self.payload_bytes_read - earlier.payload_bytes_read,
            payload_bytes_written: self.payload_bytes_written - earlier.payload_bytes_written,
        }
    }

    fn record(&mut self, kind: OpKind, read: u64, written: u64, payload: bool) {
        *self.ops.entry(kind).or_default() += 1;
        self.bytes_read += read;
        self.bytes_written += written;
        if payload {
            self.payload_bytes_read += read;
            self.payload_bytes_written += written;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub total: Counters,
    pub by_actor: BTreeMap<Actor, Counters>,
}

impl CounterSnapshot {
    pub fn actor(&self, actor: Actor) -> Counters {
        self.by_actor.get(&actor).cloned().unwrap_or_default()
    }

    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            total: self.total.since(&earlier.total),
            by_actor: self.by_actor.iter().map(|(a, c)| (*a, c.since(&earlier.actor(*a)))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    /// 1-based index among all operations since the trace started.
    pub index: u64,
    pub kind: OpKind,
    pub key: String,
    pub actor: Actor,
}

#[derive(Default)]
struct Faults {
    /// Operations numbered above this fail, until cleared.
    crash_after: Option<u64>,
    fail_puts_containing: Vec<String>,
}

#[derive(Default)]
struct Instrumentation {
    counters: CounterSnapshot,
    op_seq: u64,
    faults: Faults,
    trace: Option<Vec<TraceEntry>>,
}

struct Inner {
    backend: Box<dyn Backend>,
    state: Mutex<Instrumentation>,
    gate_closed: Mutex<bool>,
    gate_cv: Condvar,
    prefer_indicator: bool,
}

/// Instrumented handle to a backend. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Storage {
    inner: Arc<Inner>,
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Storage").field("atomic_rename", &self.supports_atomic_rename()).finish()
    }
}

impl Storage {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_box(Box::new(backend), false)
    }

    fn from_box(backend: Box<dyn Backend>, prefer_indicator: bool) -> Self {
        Self {
            inner: Arc::new(Inner {
                backend,
                state: Mutex::default(),
                gate_closed: Mutex::new(false),
                gate_cv: Condvar::new(),
                prefer_indicator,
            }),
        }
    }

    pub fn memory() -> Self {
        Self::new(MemoryBackend::new())
    }

    /// In-memory store that cannot rename directories (commits via indicator file).
    pub fn memory_without_rename() -> Self {
        Self::new(MemoryBackend::without_atomic_rename())
    }

    pub fn filesystem(root: impl Into<std::path::PathBuf>) -> Result<Self> {
        Ok(Self::new(FsBackend::new(root)?))
    }

    /// Filesystem store that commits with an indicator file even though it could rename.
    pub fn filesystem_with_indicator(root: impl Into<std::path::PathBuf>) -> Result<Self> {
        Ok(Self::from_box(Box::new(FsBackend::new(root)?), true))
    }

    /// Whether saves on this storage commit by atomic directory rename.
    pub fn supports_atomic_rename(&self) -> bool {
        self.inner.backend.supports_atomic_rename() && !self.inner.prefer_indicator
    }

    // ---- instrumentation -------------------------------------------------

    pub fn counters(&self) -> CounterSnapshot {
        self.inner.state.lock().unwrap().counters.clone()
    }

    /// Number of operations issued so far (including failed ones).
    pub fn op_count(&self) -> u64 {
        self.inner.state.lock().unwrap().op_seq
    }

    /// Every operation numbered above `k` (counting from now) fails until [`Storage::clear_faults`].
    pub fn crash_after(&self, k: u64) {
        let mut st = self.inner.state.lock().unwrap();
        st.faults.crash_after = Some(st.op_seq + k);
    }

    pub fn fail_puts_containing(&self, fragment: &str) {
        self.inner.state.lock().unwrap().faults.fail_puts_containing.push(fragment.to_string());
    }

    pub fn clear_faults(&self) {
        self.inner.state.lock().unwrap().faults = Faults::default();
    }

    pub fn start_trace(&self) {
        self.inner.state.lock().unwrap().trace = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<TraceEntry> {
        self.inner.state.lock().unwrap().trace.take().unwrap_or_default()
    }

    /// Blocks chunk payload writes until [`Storage::open_gate`].
    pub fn close_gate(&self) {
        *self.inner.gate_closed.lock().unwrap() = true;
    }

    pub fn open_gate(&self) {
        *self.inner.gate_closed.lock().unwrap() = false;
        self.inner.gate_cv.notify_all();
    }

    fn begin(&self, kind: OpKind, key: &str) -> Result<()> {
        let mut st = self.inner.state.lock().unwrap();
        st.op_seq += 1;
        let index = st.op_seq;
        if let Some(trace) = st.trace.as_mut() {
            trace.push(TraceEntry { index, kind, key: key.to_string(), actor: current_actor() });
        }
        if st.faults.crash_after.is_some_and(|k| index > k) {
            return Err(Error::Crashed { op: index, key: key.to_string() });
        }
        if kind == OpKind::Put && st.faults.fail_puts_containing.iter().any(|f| key.contains(f.as_str())) {
            return Err(Error::Storage { key: key.to_string(), reason: "injected write failure".into() });
        }
        Ok(())
    }

    fn finish(&self, kind: OpKind, key: &str, read: u64, written: u64) {
        let payload = is_payload_key(key);
        let mut st = self.inner.state.lock().unwrap();
        st.counters.total.record(kind, read, written, payload);
        st.counters.by_actor.entry(current_actor()).or_default().record(kind, read, written, payload);
    }

    fn wait_gate(&self, key: &str) {
        if !is_payload_key(key) {
            return;
        }
        let mut closed = self.inner.gate_closed.lock().unwrap();
        while *closed {
            closed = self.inner.gate_cv.wait(closed).unwrap();
        }
    }

    // ---- operations --------------------------------------------------------

    pub fn put(&self, key: &str, data: impl AsRef<[u8]>) -> Result<()> {
        let data = data.as_ref();
        self.wait_gate(key);
        self.begin(OpKind::Put, key)?;
        self.inner.backend.put(key, data)?;
        self.finish(OpKind::Put, key, 0, data.len() as u64);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>> {
        self.begin(OpKind::Get, key)?;
        let data = self.inner.backend.get(key)?;
        self.finish(OpKind::Get, key, data.len() as u64, 0);
        Ok(data)
    }

    pub fn get_range(&self, key: &str, offset: u64, len: u64) -> Result<Vec<u8>> {
        self.begin(OpKind::GetRange, key)?;
        let data = self.inner.backend.get_range(key, offset, len)?;
        self.finish(OpKind::GetRange, key, data.len() as u64, 0);
        Ok(data)
    }

    pub fn head(&self, key: &str) -> Result<Option<u64>> {
        self.begin(OpKind::Head, key)?;
        let r = self.inner.backend.head(key)?;
        self.finish(OpKind::Head, key, 0, 0);
        Ok(r)
    }

    pub fn list(&self, prefix: &str) -> Result<Vec<String>> {
        self.begin(OpKind::List, prefix)?;
        let r = self.inner.backend.list(prefix)?;
        self.finish(OpKind::List, prefix, 0, 0);
        Ok(r)
    }

    pub fn delete(&self, key: &str) -> Result<()> {
        self.begin(OpKind::Delete, key)?;
        self.inner.backend.delete(key)?;
        self.finish(OpKind::Delete, key, 0, 0);
        Ok(())
    }

    pub fn delete_prefix(&self, prefix: &str) -> Result<()> {
        self.begin(OpKind::DeletePrefix, prefix)?;
        self.inner.backend.delete_prefix(prefix)?;
        self.finish(OpKind::DeletePrefix, prefix, 0, 0);
        Ok(())
    }

    pub fn rename(&self, src: &str, dst: &str) -> Result<()> {
        self.begin(OpKind::Rename, src)?;
        self.inner.backend.rename(src, dst)?;
        self.finish(OpKind::Rename, src, 0, 0);
        Ok(())
    }

    pub fn create_dir(&self, prefix: &str) -> Result<()> {
        self.begin(OpKind::CreateDir, prefix)?;
        self.inner.backend.create_dir(prefix)?;
        self.finish(OpKind::CreateDir, prefix, 0, 0);
        Ok(())
    }

    pub fn exists(&self, path: &str) -> Result<bool> {
        self.begin(OpKind::Exists, path)?;
        let r = self.inner.backend.exists(path)?;
        self.finish(OpKind::Exists, path, 0, 0);
        Ok(r)
    }

    /// All objects below `prefix`, read straight from the backend without
    /// touching counters or faults. For tests and tooling.
    pub fn dump(&self, prefix: &str) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for key in self.inner.backend.list(prefix)? {
            let v = self.inner.backend.get(&key)?;
            out.insert(key, v);
        }
        Ok(out)
    }

    /// Uncounted backend access for test setup and corruption injection.
    pub fn raw(&self) -> &dyn Backend {
        self.inner.backend.as_ref()
    }
}

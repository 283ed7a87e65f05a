//! Simulated multi-process runtime.
//!
//! Every simulated process is an OS thread sharing one [`Storage`]. Two
//! coordination modes are offered:
//!
//! * multi-controller: [`Runtime::run_processes`] runs the same closure on
//!   every process. Process 0 is the leader. Processes coordinate through
//!   named barriers, a small leader broadcast and a bulk point-to-point
//!   exchange.
//! * single-controller: the calling thread acts as the controller and hands
//!   tasks to worker contexts with [`Runtime::run_on_workers`].
//!
//! Each `run_processes` call is an epoch with its own barrier registry and
//! mailboxes. A process that returns an error aborts peers waiting on
//! barriers; a process crashed by the crash schedule simply stops arriving,
//! so peers time out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::{current_actor, with_actor, Actor, Storage};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);
pub const MAX_BROADCAST_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    MultiController,
    SingleController,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::MultiController => "multi-controller",
            Mode::SingleController => "single-controller",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-controller" | "multi" => Ok(Mode::MultiController),
            "single-controller" | "single" => Ok(Mode::SingleController),
            other => Err(Error::InvalidOption(format!("unknown mode {other:?}"))),
        }
    }
}

/// Process `process` crashes when it reaches its `at`-th synchronization point
/// (0-based, counted over the runtime's lifetime). Synchronization points are
/// barrier arrivals in multi-controller mode and task dispatches in
/// single-controller mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashPoint {
    pub process: usize,
    pub at: u64,
}

impl FromStr for CrashPoint {
    type Err = Error;

    /// `<process>@<point>`, e.g. `2@1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidOption(format!("crash point {s:?} is not <process>@<point>"));
        let (p, k) = s.split_once('@').ok_or_else(bad)?;
        Ok(CrashPoint { process: p.trim().parse().map_err(|_| bad())?, at: k.trim().parse().map_err(|_| bad())? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeConfig {
    pub process_count: usize,
    pub mode: Mode,
    pub barrier_timeout: Duration,
    /// Seeds random delays at scheduling points; `None` disables them.
    pub seed: Option<u64>,
    pub crash_schedule: Vec<CrashPoint>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { process_count: 1, mode: Mode::MultiController, barrier_timeout: DEFAULT_BARRIER_TIMEOUT, seed: None, crash_schedule: vec![] }
    }
}

impl RuntimeConfig {
    pub fn new(process_count: usize, mode: Mode) -> Self {
        Self { process_count, mode, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.barrier_timeout = timeout;
        self
    }

    pub fn with_crash(mut self, point: CrashPoint) -> Self {
        self.crash_schedule.push(point);
        self
    }
}

/// Something observable that happened during a run, for protocol tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub actor: Actor,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RuntimeStats {
    /// action name -> actor -> count
    pub actions: BTreeMap<String, BTreeMap<Actor, u64>>,
    pub barriers_completed: u64,
    pub broadcasts: u64,
    pub broadcast_bytes: u64,
    /// Bytes moved by the bulk exchange (receiver side).
    pub exchange_bytes: u64,
}

impl RuntimeStats {
    pub fn action_count(&self, action: &str) -> u64 {
        self.actions.get(action).map(|m| m.values().sum()).unwrap_or(0)
    }

    pub fn action_actors(&self, action: &str) -> BTreeSet<Actor> {
        self.actions.get(action).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }
}

struct Shared {
    config: RuntimeConfig,
    storage: Storage,
    stats: Mutex<RuntimeStats>,
    events: Mutex<Vec<Event>>,
    sync_points: Vec<AtomicU64>,
    crashed: Mutex<BTreeSet<usize>>,
    next_op: AtomicU64,
    next_epoch: AtomicU64,
}

/// Handle to the simulated cluster. Cheap to clone.
#[derive(Clone)]
pub struct Runtime {
    shared: Arc<Shared>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("config", &self.shared.config).finish()
    }
}

impl Runtime {
    pub fn new(storage: Storage, config: RuntimeConfig) -> Result<Self> {
        if config.process_count == 0 {
            return Err(Error::InvalidOption("process count must be at least 1".into()));
        }
        if let Some(c) = config.crash_schedule.iter().find(|c| c.process >= config.process_count) {
            return Err(Error::InvalidOption(format!("crash schedule names process {} of {}", c.process, config.process_count)));
        }
        let sync_points = (0..config.process_count).map(|_| AtomicU64::new(0)).collect();
        Ok(Self {
            shared: Arc::new(Shared {
                config,
                storage,
                stats: Mutex::default(),
                events: Mutex::default(),
                sync_points,
                crashed: Mutex::default(),
                next_op: AtomicU64::new(0),
                next_epoch: AtomicU64::new(0),
            }),
        })
    }

    /// One process, multi-controller.
    pub fn local(storage: Storage) -> Self {
        Self::new(storage, RuntimeConfig::default()).expect("default config is valid")
    }

    pub fn storage(&self) -> &Storage {
        &self.shared.storage
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    pub fn process_count(&self) -> usize {
        self.shared.config.process_count
    }

    pub fn mode(&self) -> Mode {
        self.shared.config.mode
    }

    /// Fresh identifier for one checkpoint operation, used in barrier names.
    pub fn next_op_id(&self) -> u64 {
        self.shared.next_op.fetch_add(1, Ordering::Relaxed)
    }

    pub fn stats(&self) -> RuntimeStats {
        self.shared.stats.lock().unwrap().clone()
    }

    pub fn events(&self) -> Vec<Event> {
        self.shared.events.lock().unwrap().clone()
    }

    pub fn clear_events(&self) {
        self.shared.events.lock().unwrap().clear();
    }

    /// Processes stopped by the crash schedule.
    pub fn crashed(&self) -> BTreeSet<usize> {
        self.shared.crashed.lock().unwrap().clone()
    }

    /// Counts an action performed by the current actor.
    pub fn note_action(&self, action: &str) {
        let mut st = self.shared.stats.lock().unwrap();
        *st.actions.entry(action.to_string()).or_default().entry(current_actor()).or_default() += 1;
    }

    pub fn record_event(&self, kind: &str, detail: impl Into<String>) {
        self.shared.events.lock().unwrap().push(Event { actor: current_actor(), kind: kind.into(), detail: detail.into() });
    }

    /// Advances `process`'s synchronization-point counter; errors if the
    /// crash schedule stops the process here (or it already crashed).
    fn sync_point(&self, process: usize) -> Result<()> {
        if self.shared.crashed.lock().unwrap().contains(&process) {
            return Err(Error::ProcessCrashed(process));
        }
        let k = self.shared.sync_points[process].fetch_add(1, Ordering::SeqCst);
        if self.shared.config.crash_schedule.iter().any(|c| c.process == process && c.at == k) {
            self.shared.crashed.lock().unwrap().insert(process);
            return Err(Error::ProcessCrashed(process));
        }
        Ok(())
    }

    fn rng_for(&self, epoch: u64, process: usize) -> Option<ChaCha8Rng> {
        self.shared.config.seed.map(|s| {
            ChaCha8Rng::seed_from_u64(s ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (process as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        })
    }

    /// Runs `f` once per process, each on its own thread with the storage
    /// actor set to that process. Returns every process's result.
    pub fn run_processes<T, F>(&self, f: F) -> Result<Vec<Result<T>>>
    where
        T: Send,
        F: Fn(&ProcessCtx) -> Result<T> + Sync,
    {
        if self.mode() != Mode::MultiController {
            return Err(Error::WrongMode("run_processes needs multi-controller mode".into()));
        }
        Ok(self.fan_out(&(0..self.process_count()).collect::<Vec<_>>(), |ctx| f(ctx)))
    }

    /// [`Runtime::run_processes`] collapsed to one result: all values, or the
    /// most informative error.
    pub fn run_all<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&ProcessCtx) -> Result<T> + Sync,
    {
        collect_results(self.run_processes(f)?)
    }

    /// Single-controller dispatch: runs `task(worker)` on each listed worker
    /// context. Errors carry the failing worker's index.
    pub fn run_on_workers<T, F>(&self, workers: &[usize], task: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        if self.mode() != Mode::SingleController {
            return Err(Error::WrongMode("run_on_workers needs single-controller mode".into()));
        }
        if let Some(w) = workers.iter().find(|&&w| w >= self.process_count()) {
            return Err(Error::InvalidOption(format!("worker {w} of {}", self.process_count())));
        }
        let results = self.fan_out(workers, |ctx| {
            self.sync_point(ctx.index)?;
            ctx.schedule_point();
            task(ctx.index)
        });
        let mut out = Vec::with_capacity(results.len());
        for (w, r) in workers.iter().zip(results) {
            out.push(r.map_err(|e| Error::Worker { worker: *w, source: Box::new(e) })?);
        }
        Ok(out)
    }

    /// Runs `f` as the controller identity on the calling thread.
    pub fn as_controller<R>(&self, f: impl FnOnce() -> R) -> R {
        with_actor(Actor::Controller, f)
    }

    /// Runs `f` with either the process-`p` or controller identity, according to mode.
    pub fn as_coordinator<R>(&self, f: impl FnOnce() -> R) -> R {
        match self.mode() {
            Mode::MultiController => with_actor(Actor::Process(0), f),
            Mode::SingleController => with_actor(Actor::Controller, f),
        }
    }

    fn fan_out<T, F>(&self, members: &[usize], f: F) -> Vec<Result<T>>
    where
        T: Send,
        F: Fn(&ProcessCtx) -> Result<T> + Sync,
    {
        let epoch = Arc::new(Epoch::new(self.process_count()));
        let epoch_id = self.shared.next_epoch.fetch_add(1, Ordering::Relaxed);
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = members
                .iter()
                .map(|&p| {
                    let ctx = ProcessCtx {
                        runtime: self.clone(),
                        index: p,
                        epoch: epoch.clone(),
                        rng: Mutex::new(self.rng_for(epoch_id, p)),
                        broadcasts_seen: AtomicU64::new(0),
                    };
                    s.spawn(move || {
                        with_actor(Actor::Process(p), || {
                            let r = if self.shared.crashed.lock().unwrap().contains(&p) { Err(Error::ProcessCrashed(p)) } else { f(&ctx) };
                            if let Err(e) = &r {
                                if !matches!(e, Error::ProcessCrashed(_) | Error::BarrierTimeout { .. } | Error::PeerFailed { .. }) {
                                    ctx.epoch.fail(p);
                                }
                            }
                            r
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::Io("simulated process panicked".into())))).collect()
        })
    }
}

/// Picks the error that explains a failed fan-out best: a root cause over
/// crash reports, crash reports over timeouts, timeouts over peer aborts.
pub fn collect_results<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let rank = |e: &Error| match e {
        Error::PeerFailed { .. } => 3,
        Error::BarrierTimeout { .. } => 2,
        Error::ProcessCrashed(_) => 1,
        _ => 0,
    };
    let mut best: Option<Error> = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                if best.as_ref().is_none_or(|b| rank(&e) < rank(b)) {
                    best = Some(e);
                }
            }
        }
    }
    match best {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Default)]
struct BarrierState {
    arrived: BTreeSet<usize>,
    completed: bool,
}

#[derive(Default)]
struct EpochState {
    barriers: HashMap<String, BarrierState>,
    failed: BTreeSet<usize>,
    broadcasts: Vec<Vec<u8>>,
    mailbox: HashMap<(usize, usize, String), Vec<u8>>,
}

struct Epoch {
    size: usize,
    state: Mutex<EpochState>,
    cv: Condvar,
}

impl Epoch {
    fn new(size: usize) -> Self {
        Self { size, state: Mutex::default(), cv: Condvar::new() }
    }

    fn fail(&self, p: usize) {
        self.state.lock().unwrap().failed.insert(p);
        self.cv.notify_all();
    }
}

/// One simulated process's view of the current epoch.
pub struct ProcessCtx {
    runtime: Runtime,
    index: usize,
    epoch: Arc<Epoch>,
    rng: Mutex<Option<ChaCha8Rng>>,
    broadcasts_seen: AtomicU64,
}

impl ProcessCtx {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn process_count(&self) -> usize {
        self.epoch.size
    }

    pub fn is_leader(&self) -> bool {
        self.index == 0
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn storage(&self) -> &Storage {
        self.runtime.storage()
    }

    /// Random delay when the runtime is seeded; no-op otherwise.
    pub fn schedule_point(&self) {
        let delay = self.rng.lock().unwrap().as_mut().map(|r| r.gen_range(0..400u64));
        match delay {
            Some(0) => std::thread::yield_now(),
            Some(us) => std::thread::sleep(Duration::from_micros(us)),
            None => {}
        }
    }

    /// Blocks until every process of the epoch arrives at barrier `name`.
    pub fn barrier(&self, name: &str) -> Result<()> {
        self.schedule_point();
        self.runtime.sync_point(self.index)?;
        let timeout = self.runtime.config().barrier_timeout;
        let start = Instant::now();
        let mut st = self.epoch.state.lock().unwrap();
        {
            let b = st.barriers.entry(name.to_string()).or_default();
            if b.completed || !b.arrived.insert(self.index) {
                return Err(Error::BarrierReused(name.to_string()));
            }
            if b.arrived.len() == self.epoch.size {
                b.completed = true;
                drop(st);
                self.runtime.shared.stats.lock().unwrap().barriers_completed += 1;
                self.epoch.cv.notify_all();
                return Ok(());
            }
        }
        loop {
            if st.barriers[name].completed {
                return Ok(());
            }
            st = self.check_peers(st, name)?;
            let waited = start.elapsed();
            if waited >= timeout {
                let arrived = st.barriers[name].arrived.len();
                return Err(Error::BarrierTimeout {
                    name: name.to_string(),
                    waited_ms: waited.as_millis() as u64,
                    arrived,
                    expected: self.epoch.size,
                });
            }
            st = self.epoch.cv.wait_timeout(st, timeout - waited).unwrap().0;
        }
    }

    fn check_peers<'a>(&self, st: MutexGuard<'a, EpochState>, name: &str) -> Result<MutexGuard<'a, EpochState>> {
        if let Some(&p) = st.failed.iter().find(|&&p| p != self.index) {
            return Err(Error::PeerFailed { name: name.to_string(), process: p });
        }
        Ok(st)
    }

    /// Leader sends `payload` (must be `Some` on the leader, ignored
    /// elsewhere); every process returns the leader's bytes. No storage I/O.
    pub fn broadcast(&self, payload: Option<Vec<u8>>) -> Result<Vec<u8>> {
        self.schedule_point();
        let seq = self.broadcasts_seen.fetch_add(1, Ordering::SeqCst) as usize;
        let name = format!("broadcast#{seq}");
        if self.is_leader() {
            let bytes = payload.ok_or_else(|| Error::InvalidOption("leader broadcast without payload".into()))?;
            if bytes.len() > MAX_BROADCAST_BYTES {
                return Err(Error::BroadcastTooLarge(bytes.len()));
            }
            {
                let mut stats = self.runtime.shared.stats.lock().unwrap();
                stats.broadcasts += 1;
                stats.broadcast_bytes += (bytes.len() * (self.epoch.size - 1)) as u64;
            }
            let mut st = self.epoch.state.lock().unwrap();
            debug_assert_eq!(st.broadcasts.len(), seq);
            st.broadcasts.push(bytes.clone());
            drop(st);
            self.epoch.cv.notify_all();
            return Ok(bytes);
        }
        self.wait_for(&name, |st| st.broadcasts.get(seq).cloned())
    }

    /// Bulk point-to-point transfer; pairs with [`ProcessCtx::recv`].
    pub fn send(&self, to: usize, tag: &str, bytes: Vec<u8>) -> Result<()> {
        if to >= self.epoch.size {
            return Err(Error::InvalidOption(format!("send to process {to} of {}", self.epoch.size)));
        }
        let mut st = self.epoch.state.lock().unwrap();
        st.mailbox.insert((self.index, to, tag.to_string()), bytes);
        drop(st);
        self.epoch.cv.notify_all();
        Ok(())
    }

    pub fn recv(&self, from: usize, tag: &str) -> Result<Vec<u8>> {
        let key = (from, self.index, tag.to_string());
        let bytes = self.wait_for(&format!("recv {tag} from {from}"), |st| st.mailbox.remove(&key))?;
        self.runtime.shared.stats.lock().unwrap().exchange_bytes += bytes.len() as u64;
        Ok(bytes)
    }

    fn wait_for<T>(&self, name: &str, mut take: impl FnMut(&mut EpochState) -> Option<T>) -> Result<T> {
        let timeout = self.runtime.config().barrier_timeout;
        let start = Instant::now();
        let mut st = self.epoch.state.lock().unwrap();
        loop {
            if let Some(v) = take(&mut st) {
                return Ok(v);
            }
            st = self.check_peers(st, name)?;
            let waited = start.elapsed();
            if waited >= timeout {
                return Err(Error::BarrierTimeout {
                    name: name.to_string(),
                    waited_ms: waited.as_millis() as u64,
                    arrived: 0,
                    expected: 1,
                });
            }
            st = self.epoch.cv.wait_timeout(st, timeout - waited).unwrap().0;
        }
    }
}

//! Step-sequence checkpoint management.
//!
//! A [`Checkpointer`] owns a root directory holding one checkpoint per
//! training step in `step_<step:08>`. It decides when to save, keeps a
//! catalog of known steps, applies a retention policy after every finalized
//! save and finds the latest finalized step. Storage listings in
//! multi-controller mode happen on the leader only; the result is broadcast.

use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coordination::{Mode, Runtime};
use crate::error::{Error, Result};
use crate::save::{self, is_finalized, temp_created_millis, unix_millis, SaveHandle, SaveOptions};
use crate::storage::Storage;
use crate::tree::{join, Checkpointables};

pub const STEP_PREFIX: &str = "step_";

/// Directory name of `step`. Below 10^8, lexicographic order equals numeric order.
pub fn step_dir(step: u64) -> String {
    format!("{STEP_PREFIX}{step:08}")
}

pub fn parse_step_dir(name: &str) -> Option<u64> {
    let digits = name.strip_prefix(STEP_PREFIX)?;
    if digits.len() < 8 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Whether `step` falls on the save interval `n`.
pub fn should_save(step: u64, n: u64) -> Result<bool> {
    if n == 0 {
        return Err(Error::InvalidOption("save interval must be at least 1".into()));
    }
    Ok(step.is_multiple_of(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    pub keep_last: usize,
    /// Steps divisible by this are kept permanently.
    #[serde(default)]
    pub keep_period: Option<u64>,
}

impl RetentionPolicy {
    pub fn new(keep_last: usize, keep_period: Option<u64>) -> Result<Self> {
        let p = Self { keep_last, keep_period };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keep_last == 0 {
            return Err(Error::InvalidOption("keep_last must be at least 1".into()));
        }
        if self.keep_period == Some(0) {
            return Err(Error::InvalidOption("keep_period must be at least 1".into()));
        }
        Ok(())
    }

    /// Steps kept out of the finalized `steps`.
    pub fn retained(&self, steps: &[u64]) -> BTreeSet<u64> {
        let sorted: BTreeSet<u64> = steps.iter().copied().collect();
        let mut keep: BTreeSet<u64> = sorted.iter().rev().take(self.keep_last.max(1)).copied().collect();
        if let Some(m) = self.keep_period {
            keep.extend(sorted.iter().filter(|&&s| s % m == 0));
        }
        keep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: u64,
    pub finalized: bool,
}

/// Step directories present under a root, sorted by step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCatalog {
    pub root: String,
    pub steps: Vec<StepEntry>,
}

/// Names of the immediate children of `root` among recursive `keys`.
fn child_names(keys: &[String], root: &str) -> BTreeSet<String> {
    let skip = if root.is_empty() { 0 } else { root.len() + 1 };
    keys.iter().filter_map(|k| k.get(skip..)?.split('/').next().map(str::to_string)).collect()
}

impl StepCatalog {
    pub fn empty(root: &str) -> Self {
        Self { root: root.trim_end_matches('/').to_string(), steps: vec![] }
    }

    /// Builds the catalog from a storage listing on the calling thread.
    pub fn scan_local(storage: &Storage, root: &str) -> Result<Self> {
        let mut cat = Self::empty(root);
        let keys = storage.list(&cat.root)?;
        for name in child_names(&keys, &cat.root) {
            if let Some(step) = parse_step_dir(&name) {
                let finalized = is_finalized(storage, &join(&cat.root, &name))?;
                cat.steps.push(StepEntry { step, finalized });
            }
        }
        cat.steps.sort_by_key(|e| e.step);
        Ok(cat)
    }

    /// [`StepCatalog::scan_local`] on the leader (or controller), shared with every process.
    pub fn scan(runtime: &Runtime, root: &str) -> Result<Self> {
        let storage = runtime.storage();
        match runtime.mode() {
            Mode::SingleController => runtime.as_controller(|| Self::scan_local(storage, root)),
            Mode::MultiController => {
                let out = runtime.run_all(|ctx| {
                    let payload = if ctx.is_leader() {
                        let cat = Self::scan_local(storage, root)?;
                        Some(serde_json::to_vec(&cat).map_err(|e| Error::Io(e.to_string()))?)
                    } else {
                        None
                    };
                    let bytes = ctx.broadcast(payload)?;
                    serde_json::from_slice::<Self>(&bytes).map_err(|e| Error::Io(e.to_string()))
                })?;
                Ok(out.into_iter().next().expect("at least one process"))
            }
        }
    }

    pub fn path(&self, step: u64) -> String {
        join(&self.root, &step_dir(step))
    }

    pub fn finalized_steps(&self) -> Vec<u64> {
        self.steps.iter().filter(|e| e.finalized).map(|e| e.step).collect()
    }

    pub fn latest_finalized(&self) -> Option<u64> {
        self.finalized_steps().last().copied()
    }

    pub fn get(&self, step: u64) -> Option<StepEntry> {
        self.steps.iter().find(|e| e.step == step).copied()
    }

    /// Adds or replaces the entry for `entry.step`.
    pub fn record(&mut self, entry: StepEntry) {
        match self.steps.binary_search_by_key(&entry.step, |e| e.step) {
            Ok(i) => self.steps[i] = entry,
            Err(i) => self.steps.insert(i, entry),
        }
    }

    pub fn remove(&mut self, step: u64) {
        self.steps.retain(|e| e.step != step);
    }
}

/// Highest finalized step under `root`.
pub fn latest_step(runtime: &Runtime, root: &str) -> Result<Option<u64>> {
    Ok(StepCatalog::scan(runtime, root)?.latest_finalized())
}

/// Deletes finalized steps outside `policy`. The latest finalized step is
/// always kept. A failed deletion leaves that step in the catalog.
pub fn garbage_collect(runtime: &Runtime, catalog: &mut StepCatalog, policy: &RetentionPolicy) -> Result<Vec<u64>> {
    policy.validate()?;
    let finalized = catalog.finalized_steps();
    let mut keep = policy.retained(&finalized);
    keep.extend(catalog.latest_finalized());
    let mut deleted = vec![];
    for step in finalized.into_iter().filter(|s| !keep.contains(s)) {
        let path = catalog.path(step);
        runtime.as_coordinator(|| runtime.storage().delete_prefix(&path))?;
        catalog.remove(step);
        deleted.push(step);
    }
    Ok(deleted)
}

/// Removes leftovers of failed saves under `root`: temporary directories
/// older than `max_age`, and unfinalized step directories below the latest
/// finalized step. Returns the removed directory names.
pub fn sweep_incomplete(runtime: &Runtime, root: &str, max_age: Duration) -> Result<Vec<String>> {
    let storage = runtime.storage();
    let root = root.trim_end_matches('/');
    runtime.as_coordinator(|| {
        let cutoff = unix_millis().saturating_sub(max_age.as_millis() as u64);
        let keys = storage.list(root)?;
        let names = child_names(&keys, root);
        let cat = StepCatalog::scan_local(storage, root)?;
        let latest = cat.latest_finalized();
        let mut removed = vec![];
        for name in names {
            let stale_temp = name.contains(".tmp.") && temp_created_millis(&name).is_some_and(|t| t <= cutoff);
            let stale_step =
                parse_step_dir(&name).and_then(|s| cat.get(s)).is_some_and(|e| !e.finalized && latest.is_some_and(|l| e.step < l));
            if stale_temp || stale_step {
                storage.delete_prefix(&join(root, &name))?;
                removed.push(name);
            }
        }
        Ok(removed)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointerOptions {
    pub save_interval: u64,
    pub retention: Option<RetentionPolicy>,
    pub save: SaveOptions,
}

impl Default for CheckpointerOptions {
    fn default() -> Self {
        Self { save_interval: 1, retention: None, save: SaveOptions::default() }
    }
}

struct State {
    catalog: StepCatalog,
    /// Set after a failed save; the next catalog access rescans storage.
    stale: bool,
    in_flight: Option<u64>,
    retention_error: Option<Error>,
}

struct Shared {
    state: Mutex<State>,
    idle: Condvar,
}

/// Saves a sequence of steps under one root. One save runs at a time; a new
/// save waits for the previous one to finish.
pub struct Checkpointer {
    runtime: Runtime,
    root: String,
    opts: CheckpointerOptions,
    shared: Arc<Shared>,
}

impl Checkpointer {
    pub fn new(runtime: &Runtime, root: &str, opts: CheckpointerOptions) -> Result<Self> {
        should_save(0, opts.save_interval)?;
        if let Some(p) = &opts.retention {
            p.validate()?;
        }
        let catalog = StepCatalog::scan(runtime, root)?;
        Ok(Self {
            runtime: runtime.clone(),
            root: catalog.root.clone(),
            opts,
            shared: Arc::new(Shared {
                state: Mutex::new(State { catalog, stale: false, in_flight: None, retention_error: None }),
                idle: Condvar::new(),
            }),
        })
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn should_save(&self, step: u64) -> bool {
        step.is_multiple_of(self.opts.save_interval)
    }

    pub fn step_path(&self, step: u64) -> String {
        join(&self.root, &step_dir(step))
    }

    /// Blocks until no save is in flight. Returns (and clears) any deferred
    /// retention error.
    pub fn wait_until_finished(&self) -> Result<()> {
        let mut st = self.idle_state();
        match st.retention_error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn idle_state(&self) -> std::sync::MutexGuard<'_, State> {
        let mut st = self.shared.state.lock().unwrap();
        while st.in_flight.is_some() {
            st = self.shared.idle.wait(st).unwrap();
        }
        st
    }

    fn refreshed(&self) -> Result<std::sync::MutexGuard<'_, State>> {
        let mut st = self.idle_state();
        if st.stale {
            st.catalog = StepCatalog::scan(&self.runtime, &self.root)?;
            st.stale = false;
        }
        Ok(st)
    }

    /// Catalog after the in-flight save (if any) has finished.
    pub fn catalog(&self) -> Result<StepCatalog> {
        Ok(self.refreshed()?.catalog.clone())
    }

    pub fn latest_step(&self) -> Result<Option<u64>> {
        Ok(self.refreshed()?.catalog.latest_finalized())
    }

    /// Saves `items` as `step`. The step must exceed the latest finalized
    /// step. Retention runs after the save is finalized.
    pub fn save_step(&self, step: u64, items: &Checkpointables) -> Result<SaveHandle> {
        {
            let mut st = self.refreshed()?;
            if let Some(latest) = st.catalog.latest_finalized() {
                if step <= latest {
                    return Err(Error::NonMonotonicStep { step, latest });
                }
            }
            st.in_flight = Some(step);
        }
        let shared = self.shared.clone();
        let runtime = self.runtime.clone();
        let policy = self.opts.retention;
        let on_complete = Box::new(move |r: &Result<()>| {
            let mut st = shared.state.lock().unwrap();
            match r {
                Ok(()) => {
                    st.catalog.record(StepEntry { step, finalized: true });
                    if let Some(p) = policy {
                        if let Err(e) = garbage_collect(&runtime, &mut st.catalog, &p) {
                            st.retention_error = Some(e);
                        }
                    }
                }
                Err(_) => st.stale = true,
            }
            st.in_flight = None;
            shared.idle.notify_all();
        });
        let path = self.step_path(step);
        let r = save::save_with_callback(&self.runtime, &path, items, &self.opts.save, Some(on_complete));
        if r.is_err() {
            // validation errors return before the callback is installed
            let mut st = self.shared.state.lock().unwrap();
            st.in_flight = None;
            self.shared.idle.notify_all();
        }
        r
    }

    /// Saves `items` if `step` is on the save interval.
    pub fn maybe_save(&self, step: u64, items: &Checkpointables) -> Result<Option<SaveHandle>> {
        if self.should_save(step) {
            self.save_step(step, items).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Applies the retention policy now. Returns the deleted steps.
    pub fn garbage_collect(&self) -> Result<Vec<u64>> {
        let Some(policy) = self.opts.retention else { return Ok(vec![]) };
        let mut st = self.refreshed()?;
        garbage_collect(&self.runtime, &mut st.catalog, &policy)
    }
}

impl Drop for Checkpointer {
    fn drop(&mut self) {
        drop(self.idle_state());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_names_sort_numerically() {
        let steps = [0u64, 5, 10, 123, 99_999_999];
        let names: Vec<String> = steps.iter().map(|&s| step_dir(s)).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(step_dir(5), "step_00000005");
        for (n, s) in names.iter().zip(steps) {
            assert_eq!(parse_step_dir(n), Some(s));
        }
        assert_eq!(parse_step_dir(&step_dir(100_000_000)), Some(100_000_000));
        for bad in ["step_5", "step_0000000x", "step_00000005.tmp.1-2-3", "ckpt_00000001"] {
            assert_eq!(parse_step_dir(bad), None);
        }
    }

    #[test]
    fn save_interval() {
        assert!(should_save(0, 5).unwrap());
        assert!(!should_save(7, 5).unwrap());
        let saved: Vec<u64> = (0..=20).filter(|&s| should_save(s, 5).unwrap()).collect();
        assert_eq!(saved, vec![0, 5, 10, 15, 20]);
        assert!(should_save(3, 0).is_err());
    }

    #[test]
    fn retention_examples() {
        let steps: Vec<u64> = (0..10).collect();
        let p = RetentionPolicy::new(3, None).unwrap();
        assert_eq!(p.retained(&steps), BTreeSet::from([7, 8, 9]));
        let p = RetentionPolicy::new(3, Some(4)).unwrap();
        assert_eq!(p.retained(&steps), BTreeSet::from([0, 4, 7, 8, 9]));
        assert_eq!(RetentionPolicy::new(1, None).unwrap().retained(&[42]), BTreeSet::from([42]));
        assert!(RetentionPolicy::new(0, None).is_err());
        assert!(RetentionPolicy::new(1, Some(0)).is_err());
    }

    #[test]
    fn catalog_record_keeps_order() {
        let mut c = StepCatalog::empty("r/");
        for s in [5, 0, 10, 5] {
            c.record(StepEntry { step: s, finalized: s != 10 });
        }
        assert_eq!(c.steps.iter().map(|e| e.step).collect::<Vec<_>>(), vec![0, 5, 10]);
        assert_eq!(c.latest_finalized(), Some(5));
        assert_eq!(c.path(5), "r/step_00000005");
    }
}

use std::fmt;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SavePhase {
    Validating,
    Snapshotted,
    Writing,
    Merging,
    Finalized,
    Failed,
}

impl fmt::Display for SavePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

pub type CompletionCallback = Box<dyn FnOnce(&Result<()>) + Send>;

/// Moves the phase forward; never backwards and never out of a terminal phase.
pub(crate) fn advance(phase: &Mutex<SavePhase>, next: SavePhase) {
    let mut p = phase.lock().unwrap();
    let terminal = matches!(*p, SavePhase::Finalized | SavePhase::Failed);
    if !terminal && (next > *p || next == SavePhase::Failed) {
        *p = next;
    }
}

enum State {
    Running(JoinHandle<Result<()>>),
    Done(Result<()>),
    Reported,
}

/// Tracks the background phase of one save.
pub struct SaveHandle {
    path: String,
    phase: Arc<Mutex<SavePhase>>,
    state: Mutex<State>,
}

impl fmt::Debug for SaveHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SaveHandle").field("path", &self.path).field("phase", &self.phase()).finish()
    }
}

impl SaveHandle {
    pub(crate) fn spawn(path: String, phase: Arc<Mutex<SavePhase>>, job: impl FnOnce() -> Result<()> + Send + 'static) -> Self {
        let h = std::thread::spawn(job);
        Self { path, phase, state: Mutex::new(State::Running(h)) }
    }

    pub(crate) fn completed(path: String, phase: Arc<Mutex<SavePhase>>) -> Self {
        Self { path, phase, state: Mutex::new(State::Done(Ok(()))) }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn phase(&self) -> SavePhase {
        *self.phase.lock().unwrap()
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase(), SavePhase::Finalized | SavePhase::Failed)
    }

    /// Joins the background phase. A failure is reported by the first call
    /// only; later calls return `Ok`.
    pub fn wait(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();

        match std::mem::replace(&mut *st, State::Reported) {
            State::Running(h) => h.join().unwrap_or_else(|_| Err(Error::Io("save thread panicked".into()))),
            State::Done(r) => r,
            State::Reported => Ok(()),
        }
    }
}

impl Drop for SaveHandle {
    fn drop(&mut self) {
        if let Ok(st) = self.state.get_mut() {
            if let State::Running(h) = std::mem::replace(st, State::Reported) {
                let _ = h.join();
            }
        }
    }
}

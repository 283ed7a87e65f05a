use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use super::{under, Backend};
use crate::error::{Error, Result};

#[derive(Default)]
struct State {
    objects: BTreeMap<String, Vec<u8>>,
    dirs: BTreeSet<String>,
}

/// Key -> bytes map. Directory renames are atomic unless disabled, which
/// models object stores that need an indicator file instead.
pub struct MemoryBackend {
    state: Mutex<State>,
    atomic_rename: bool,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self { state: Mutex::default(), atomic_rename: true }
    }

    pub fn without_atomic_rename() -> Self {
        Self { state: Mutex::default(), atomic_rename: false }
    }
}

impl Default for MemoryBackend {
    fn default() -> Self {
        Self::new()
    }
}

fn not_found(key: &str) -> Error {
    Error::NotFound(key.to_string())
}

impl Backend for MemoryBackend {
    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        self.state.lock().unwrap().objects.insert(key.to_string(), data.to_vec());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        self.state.lock().unwrap().objects.get(key).cloned().ok_or_else(|| not_found(key))
    }

    fn get_range(&self, key: &str, offset: u64, len: u64) -> Result<Vec<u8>> {
        let state = self.state.lock().unwrap();
        let obj = state.objects.get(key).ok_or_else(|| not_found(key))?;
        let (start, end) = (offset as usize, (offset + len) as usize);
        if end > obj.len() {
            return Err(Error::Storage {
                key: key.to_string(),
                reason: format!("range {start}..{end} beyond object of {} bytes", obj.len()),
            });
        }
        Ok(obj[start..end].to_vec())
    }

    fn head(&self, key: &str) -> Result<Option<u64>> {
        Ok(self.state.lock().unwrap().objects.get(key).map(|o| o.len() as u64))
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let state = self.state.lock().unwrap();
        Ok(state.objects.keys().filter(|k| under(k, prefix)).cloned().collect())
    }

    fn delete(&self, key: &str) -> Result<()> {
        self.state.lock().unwrap().objects.remove(key);
        Ok(())
    }

    fn delete_prefix(&self, prefix: &str) -> Result<()> {
        let mut state = self.state.lock().unwrap();
        state.objects.retain(|k, _| !(k == prefix || under(k, prefix)));
        state.dirs.retain(|d| !(d == prefix || under(d, prefix)));
        Ok(())
    }

    fn rename(&self, src: &str, dst: &str) -> Result<()> {
        if !self.atomic_rename {
            return Err(Error::Storage { key: src.to_string(), reason: "backend has no atomic rename".into() });
        }
        let mut state = self.state.lock().unwrap();
        let exists = |s: &State, p: &str| s.objects.keys().any(|k| under(k, p)) || s.dirs.iter().any(|d| d == p || under(d, p));
        if exists(&state, dst) {
            return Err(Error::Storage { key: dst.to_string(), reason: "rename destination exists".into() });
        }
        if !exists(&state, src) {
            return Err(not_found(src));
        }
        let moved: Vec<String> = state.objects.keys().filter(|k| under(k, src)).cloned().collect();
        for k in moved {
            let v = state.objects.remove(&k).unwrap();
            state.objects.insert(format!("{dst}{}", &k[src.len()..]), v);
        }
        let dirs: Vec<String> = state.dirs.iter().filter(|d| *d == src || under(d, src)).cloned().collect();
        for d in dirs {
            state.dirs.remove(&d);
            state.dirs.insert(format!("{dst}{}", &d[src.len()..]));
        }
        Ok(())
    }

    fn create_dir(&self, prefix: &str) -> Result<()> {
        self.state.lock().unwrap().dirs.insert(prefix.to_string());
        Ok(())
    }

    fn exists(&self, path: &str) -> Result<bool> {
        let state = self.state.lock().unwrap();
        Ok(state.objects.contains_key(path)
            || state.objects.keys().any(|k| under(k, path))
            || state.dirs.iter().any(|d| d == path || under(d, path)))
    }

    fn supports_atomic_rename(&self) -> bool {
        self.atomic_rename
    }
}

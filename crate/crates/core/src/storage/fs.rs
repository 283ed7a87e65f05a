use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use walkdir::WalkDir;

use super::Backend;
use crate::error::{Error, Result};

const PARTIAL_MARKER: &str = ".__partial.";

/// Maps keys to files below a root directory. Objects are written to a
/// side file and renamed into place, so readers never see torn writes.
pub struct FsBackend {
    root: PathBuf,
    seq: AtomicU64,
}

impl FsBackend {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, seq: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        if key.is_empty() {
            self.root.clone()
        } else {
            self.root.join(key)
        }
    }
}

fn io_err(key: &str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(key.to_string())
    } else {
        Error::Storage { key: key.to_string(), reason: e.to_string() }
    }
}

impl Backend for FsBackend {
    fn put(&self, key: &str, data: &[u8]) -> Result<()> {
        let path = self.path(key);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(key, e))?;
        }
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        let side = path.with_file_name(format!(
            "{}{PARTIAL_MARKER}{}.{n}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("obj"),
            std::process::id()
        ));
        fs::write(&side, data).map_err(|e| io_err(key, e))?;
        fs::rename(&side, &path).map_err(|e| io_err(key, e))
    }

    fn get(&self, key: &str) -> Result<Vec<u8>> {
        fs::read(self.path(key)).map_err(|e| io_err(key, e))
    }

    fn get_range(&self, key: &str, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut f = fs::File::open(self.path(key)).map_err(|e| io_err(key, e))?;
        f.seek(SeekFrom::Start(offset)).map_err(|e| io_err(key, e))?;
        let mut buf = vec![0u8; len as usize];
        f.read_exact(&mut buf).map_err(|e| io_err(key, e))?;
        Ok(buf)
    }

    fn head(&self, key: &str) -> Result<Option<u64>> {
        match fs::metadata(self.path(key)) {
            Ok(m) if m.is_file() => Ok(Some(m.len())),
            Ok(_) => Ok(None),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(key, e)),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let base = self.path(prefix);
        if !base.is_dir() {
            return Ok(vec![]);
        }
        let mut keys = Vec::new();
        for entry in WalkDir::new(&base).min_depth(1) {
            let entry = entry.map_err(|e| Error::Storage { key: prefix.to_string(), reason: e.to_string() })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(&self.root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if !key.contains(PARTIAL_MARKER) {
                keys.push(key);
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn delete(&self, key: &str) -> Result<()> {
        match fs::remove_file(self.path(key)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(key, e)),
            _ => Ok(()),
        }
    }

    fn delete_prefix(&self, prefix: &str) -> Result<()> {
        let path = self.path(prefix);
        let r = if path.is_dir() { fs::remove_dir_all(&path) } else { fs::remove_file(&path) };
        match r {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(prefix, e)),
            _ => Ok(()),
        }
    }

    fn rename(&self, src: &str, dst: &str) -> Result<()> {
        let to = self.path(dst);
        if to.exists() {
            return Err(Error::Storage { key: dst.to_string(), reason: "rename destination exists".into() });
        }
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(dst, e))?;
        }
        fs::rename(self.path(src), to).map_err(|e| io_err(src, e))
    }

    fn create_dir(&self, prefix: &str) -> Result<()> {
        fs::create_dir_all(self.path(prefix)).map_err(|e| io_err(prefix, e))
    }

    fn exists(&self, path: &str) -> Result<bool> {
        Ok(self.path(path).exists())
    }

    fn supports_atomic_rename(&self) -> bool {
        true
    }
}

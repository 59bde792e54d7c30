//! Disk cache keyed by request content.
//!
//! Entries live at `{dir}/{sha256}.json` and are written atomically (temp
//! file + rename), so a crash mid-write never leaves a half-entry behind.
//! Nothing is ever evicted implicitly; `purge` is the only way to drop
//! entries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Backend, BackendError, CacheKey, Completion, PromptRequest};

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn open(dir: &Path) -> Result<Self, BackendError> {
        fs::create_dir_all(dir).map_err(|e| BackendError::Cache {
            reason: format!("cannot create {}: {e}", dir.display()),
        })?;
        Ok(DiskCache {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.0))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Completion>, BackendError> {
        let path = self.entry_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(BackendError::Cache {
                    reason: format!("cannot read {}: {e}", path.display()),
                })
            }
        };
        let completion = serde_json::from_str(&text).map_err(|e| BackendError::Cache {
            reason: format!("corrupt entry {}: {e}", path.display()),
        })?;
        Ok(Some(completion))
    }

    pub fn put(&self, key: &CacheKey, completion: &Completion) -> Result<(), BackendError> {
        let path = self.entry_path(key);
        let io_err = |e: &dyn std::fmt::Display| BackendError::Cache {
            reason: format!("cannot write {}: {e}", path.display()),
        };
        let json = serde_json::to_string_pretty(completion)
            .map_err(|e| io_err(&e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_err(&e))?;
        tmp.write_all(json.as_bytes()).map_err(|e| io_err(&e))?;
        tmp.persist(&path).map_err(|e| io_err(&e))?;
        Ok(())
    }

    /// Deletes every entry; returns how many were removed.
    pub fn purge(&self) -> Result<usize, BackendError> {
        let entries = fs::read_dir(&self.dir).map_err(|e| BackendError::Cache {
            reason: format!("cannot list {}: {e}", self.dir.display()),
        })?;
        let mut removed = 0;
        for entry in entries {
            let entry = entry.map_err(|e| BackendError::Cache {
                reason: format!("cannot list {}: {e}", self.dir.display()),
            })?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                fs::remove_file(&path).map_err(|e| BackendError::Cache {
                    reason: format!("cannot remove {}: {e}", path.display()),
                })?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

/// Serves repeated requests from disk; only misses reach the inner backend.
pub struct CachedBackend<B> {
    inner: B,
    cache: DiskCache,
    id: String,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: DiskCache) -> Self {
        let id = format!("cached:{}", inner.id());
        CachedBackend { inner, cache, id }
    }

    pub fn cache(&self) -> &DiskCache {
        &self.cache
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        let key = CacheKey::from_request(request);
        if let Some(mut hit) = self.cache.get(&key)? {
            hit.from_cache = true;
            return Ok(hit);
        }
        // Errors are not cached: a failed call should be retried next run.
        let completion = self.inner.complete(request)?;
        self.cache.put(&key, &completion)?;
        Ok(completion)
    }

    fn id(&self) -> &str {
        &self.id
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn id(&self) -> &str {
        (**self).id()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn id(&self) -> &str {
        (**self).id()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, request: &PromptRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn id(&self) -> &str {
        (**self).id()
    }
}

use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, Completion, ModelId, ModelRequest};

/// Hex SHA-256 over model name, temperature and prompt. Retries (attempt > 0)
/// get their own key so a cached unparseable reply is not replayed forever.
pub fn cache_key(model: &ModelId, prompt: &str, temperature: f64, attempt: u32) -> String {
    let mut h = Sha256::new();
    h.update(model.as_str().as_bytes());
    h.update([0u8]);
    h.update(temperature.to_bits().to_le_bytes());
    h.update([0u8]);
    if attempt > 0 {
        h.update(attempt.to_le_bytes());
        h.update([0u8]);
    }
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// One file per key holding the verbatim response.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| BackendError::Cache {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .unwrap()
            .entry(key.to_owned())
            .or_default()
            .clone()
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, BackendError> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(source) => Err(BackendError::Cache {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    pub fn put(&self, key: &str, value: &str) -> Result<(), BackendError> {
        let path = self.path(key);
        let tmp = self.dir.join(format!("{key}.tmp{}", std::process::id()));
        fs::write(&tmp, value)
            .and_then(|()| fs::rename(&tmp, &path))
            .map_err(|source| BackendError::Cache {
                path: path.display().to_string(),
                source,
            })
    }

    /// Returns the cached value for `key`, or runs `fill` and stores its
    /// result. Concurrent callers on the same key wait for the first one.
    pub fn get_or_fill(
        &self,
        key: &str,
        fill: impl FnOnce() -> Result<String, BackendError>,
    ) -> Result<(String, bool), BackendError> {
        let lock = self.key_lock(key);
        let _guard = lock.lock().unwrap();
        if let Some(hit) = self.get(key)? {
            return Ok((hit, true));
        }
        let value = fill()?;
        self.put(key, &value)?;
        Ok((value, false))
    }
}

/// Serves repeated `(model, prompt, temperature)` requests from disk.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    cache: Arc<DiskCache>,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, cache: Arc<DiskCache>) -> Self {
        Self { inner, cache }
    }
}

impl Backend for CachedBackend {
    fn model(&self) -> &ModelId {
        self.inner.model()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError> {
        let key = cache_key(
            self.model(),
            request.prompt,
            self.temperature(),
            request.attempt,
        );
        let (text, cache_hit) = self
            .cache
            .get_or_fill(&key, || self.inner.complete(request).map(|c| c.text))?;
        Ok(Completion { text, cache_hit })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Task;
    use crate::spans::Sample;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        model: ModelId,
        calls: AtomicUsize,
    }

    impl Backend for Counting {
        fn model(&self) -> &ModelId {
            &self.model
        }

        fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(Completion {
                text: format!("reply {n} to {}", request.prompt.len()),
                cache_hit: false,
            })
        }
    }

    #[test]
    fn keys_separate_model_temperature_and_attempt() {
        let a = ModelId::new("a").unwrap();
        let b = ModelId::new("b").unwrap();
        let k = cache_key(&a, "p", 0.0, 0);
        assert_eq!(k.len(), 64);
        assert_eq!(k, cache_key(&a, "p", 0.0, 0));
        assert_ne!(k, cache_key(&b, "p", 0.0, 0));
        assert_ne!(k, cache_key(&a, "p", 0.5, 0));
        assert_ne!(k, cache_key(&a, "p", 0.0, 1));
        assert_ne!(k, cache_key(&a, "q", 0.0, 0));
    }

    #[test]
    fn second_call_is_served_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let inner = Arc::new(Counting {
            model: ModelId::new("m").unwrap(),
            calls: AtomicUsize::new(0),
        });
        let cache = Arc::new(DiskCache::open(dir.path()).unwrap());
        let backend = CachedBackend::new(inner.clone(), cache.clone());
        let sample = Sample::new("s", "en", "q", "a").unwrap();
        let req = ModelRequest {
            prompt: "hello",
            sample: &sample,
            task: Task::Extract,
            attempt: 0,
        };
        let first = backend.complete(&req).unwrap();
        let second = backend.complete(&req).unwrap();
        assert!(!first.cache_hit);
        assert!(second.cache_hit);
        assert_eq!(first.text, second.text);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);

        // survives a fresh cache handle on the same directory
        let reopened = CachedBackend::new(
            inner.clone(),
            Arc::new(DiskCache::open(dir.path()).unwrap()),
        );
        assert!(reopened.complete(&req).unwrap().cache_hit);

        // retry attempts bypass the first-try entry
        let retry = ModelRequest { attempt: 1, ..req };
        assert!(!backend.complete(&retry).unwrap().cache_hit);
        assert_eq!(inner.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn concurrent_misses_fill_once() {
        let dir = tempfile::tempdir().unwrap();
        let inner = Arc::new(Counting {
            model: ModelId::new("m").unwrap(),
            calls: AtomicUsize::new(0),
        });
        let backend = CachedBackend::new(
            inner.clone(),
            Arc::new(DiskCache::open(dir.path()).unwrap()),
        );
        let sample = Sample::new("s", "en", "q", "a").unwrap();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let req = ModelRequest {
                        prompt: "same",
                        sample: &sample,
                        task: Task::Extract,
                        attempt: 0,
                    };
                    backend.complete(&req).unwrap();
                });
            }
        });
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
    }
}

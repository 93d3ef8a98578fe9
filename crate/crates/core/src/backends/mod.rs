//! Model backends: a live chat-completion client, a deterministic mock for
//! planted corpora, and a content-addressed disk cache that wraps either.

mod cache;
mod http;
mod mock;

use std::fmt;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spans::Sample;

pub use cache::{cache_key, CachedBackend, DiskCache};
pub use http::{AuthStyle, BackendConfig, HttpBackend};
pub use mock::{mock_adjudicate, mock_extract, MockBackend, MOCK_EXTRACT_PROBABILITY};

/// Name of one ensemble member, e.g. `gpt-4o`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(String);

impl ModelId {
    pub fn new(name: impl Into<String>) -> Result<Self, BackendError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(BackendError::Config("empty model name".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The four ensemble members used by default.
pub fn default_models() -> Vec<ModelId> {
    [
        "gemini-2.0-flash-exp",
        "qwen-2.5-max",
        "gpt-4o",
        "deepseek-v3",
    ]
    .into_iter()
    .map(|m| ModelId(m.to_owned()))
    .collect()
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("{model}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        model: String,
        attempts: u32,
        message: String,
    },
    #[error("{model}: malformed response: {message}")]
    Response { model: String, message: String },
    #[error("cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What the model is being asked to do. Live backends only look at the
/// prompt; the mock uses this to answer without parsing prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task<'a> {
    Extract,
    Adjudicate { span_text: &'a str },
}

impl Task<'_> {
    pub fn role(&self) -> &'static str {
        match self {
            Task::Extract => "extractor",
            Task::Adjudicate { .. } => "adjudicator",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelRequest<'a> {
    pub prompt: &'a str,
    pub sample: &'a Sample,
    pub task: Task<'a>,
    /// 0 for the first try; parse-failure retries bump it so they bypass the cache.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub cache_hit: bool,
}

pub trait Backend: Send + Sync {
    fn model(&self) -> &ModelId;

    fn temperature(&self) -> f64 {
        0.0
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError>;
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

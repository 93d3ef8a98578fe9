//! Generic chat-completion client: one user message in, the first choice's
//! text out. Providers differ only in endpoint, model name and auth header.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use super::{Backend, BackendError, Completion, ModelId, ModelRequest, Semaphore};

const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "style")]
pub enum AuthStyle {
    /// `Authorization: Bearer <key>`
    #[default]
    Bearer,
    /// Key sent verbatim in a named header, e.g. `x-api-key`.
    Header { name: String },
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub model: ModelId,
    pub endpoint: Url,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Model name sent on the wire when it differs from `model`.
    #[serde(default)]
    pub api_model: Option<String>,
    #[serde(default)]
    pub auth: AuthStyle,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_backoff")]
    pub initial_backoff_ms: u64,
}

impl BackendConfig {
    pub fn new(model: ModelId, endpoint: Url, api_key_env: impl Into<String>) -> Self {
        Self {
            model,
            endpoint,
            api_key_env: api_key_env.into(),
            api_model: None,
            auth: AuthStyle::Bearer,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            max_concurrency: default_concurrency(),
            initial_backoff_ms: default_backoff(),
        }
    }

    /// Public endpoints for the default ensemble members. All four expose an
    /// OpenAI-compatible chat-completions route.
    pub fn preset(model: &ModelId) -> Option<Self> {
        let (endpoint, env, api_model) = match model.as_str() {
            "gemini-2.0-flash-exp" => (
                "https://generativelanguage.googleapis.com/v1beta/openai/chat/completions",
                "GEMINI_API_KEY",
                None,
            ),
            "qwen-2.5-max" => (
                "https://dashscope-intl.aliyuncs.com/compatible-mode/v1/chat/completions",
                "DASHSCOPE_API_KEY",
                Some("qwen-max-2025-01-25"),
            ),
            "gpt-4o" => (
                "https://api.openai.com/v1/chat/completions",
                "OPENAI_API_KEY",
                None,
            ),
            "deepseek-v3" => (
                "https://api.deepseek.com/chat/completions",
                "DEEPSEEK_API_KEY",
                Some("deepseek-chat"),
            ),
            _ => return None,
        };
        let mut cfg = Self::new(model.clone(), Url::parse(endpoint).ok()?, env);
        cfg.api_model = api_model.map(str::to_owned);
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::Config(format!(
                "{}: timeout must be positive",
                self.model
            )));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Config(format!(
                "{}: temperature {} out of range",
                self.model, self.temperature
            )));
        }
        if self.api_key_env.is_empty() {
            return Err(BackendError::Config(format!(
                "{}: api_key_env is empty",
                self.model
            )));
        }
        Ok(())
    }

    fn wire_model(&self) -> &str {
        self.api_model.as_deref().unwrap_or(self.model.as_str())
    }
}

pub struct HttpBackend {
    config: BackendConfig,
    key: String,
    client: Client,
    in_flight: Semaphore,
}

struct Failure {
    transient: bool,
    retry_after: Option<Duration>,
    message: String,
}

impl HttpBackend {
    /// Fails with a configuration error when the key variable is unset.
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| {
                BackendError::Config(format!(
                    "{}: environment variable {} is not set",
                    config.model, config.api_key_env
                ))
            })?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("{}: {e}", config.model)))?;
        Ok(Self {
            in_flight: Semaphore::new(config.max_concurrency),
            config,
            key,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Sends `prompt`, retrying timeouts, 429 and 5xx with exponential backoff.
    pub fn complete_prompt(&self, prompt: &str) -> Result<String, BackendError> {
        let _permit = self.in_flight.acquire();
        let mut attempt = 0u32;
        loop {
            match self.send(prompt) {
                Ok(text) => return Ok(text),
                Err(f) if f.transient && attempt < self.config.max_retries => {
                    let delay = f.retry_after.unwrap_or_else(|| self.backoff(attempt));
                    log::warn!(
                        "{}: {} (retry {} in {:?})",
                        self.config.model,
                        f.message,
                        attempt + 1,
                        delay
                    );
                    std::thread::sleep(delay.min(Duration::from_millis(MAX_BACKOFF_MS)));
                    attempt += 1;
                }
                Err(f) => {
                    return Err(BackendError::Transport {
                        model: self.config.model.to_string(),
                        attempts: attempt + 1,
                        message: f.message,
                    })
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(16));
        Duration::from_millis(ms.min(MAX_BACKOFF_MS))
    }

    fn send(&self, prompt: &str) -> Result<String, Failure> {
        let body = json!({
            "model": self.config.wire_model(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let mut req = self.client.post(self.config.endpoint.clone()).json(&body);
        req = match &self.config.auth {
            AuthStyle::Bearer => req.bearer_auth(&self.key),
            AuthStyle::Header { name } => req.header(name.as_str(), &self.key),
        };
        let resp = req.send().map_err(|e| Failure {
            transient: e.is_timeout() || e.is_connect() || e.is_request(),
            retry_after: None,
            message: e.to_string(),
        })?;

        let status = resp.status();
        if !status.is_success() {
            let retry_after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let text = resp.text().unwrap_or_default();
            return Err(Failure {
                transient: status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error(),
                retry_after,
                message: format!("HTTP {}: {}", status.as_u16(), truncate(&text, 200)),
            });
        }

        let value: Value = resp.json().map_err(|e| Failure {
            transient: e.is_timeout(),
            retry_after: None,
            message: format!("unreadable body: {e}"),
        })?;
        extract_content(&value).ok_or_else(|| Failure {
            transient: false,
            retry_after: None,
            message: format!(
                "no choices[0].message.content in {}",
                truncate(&value.to_string(), 200)
            ),
        })
    }
}

fn truncate(s: &str, max_chars: usize) -> String {
    s.chars().take(max_chars).collect()
}

fn extract_content(value: &Value) -> Option<String> {
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
}

impl Backend for HttpBackend {
    fn model(&self) -> &ModelId {
        &self.config.model
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn complete(&self, request: &ModelRequest<'_>) -> Result<Completion, BackendError> {
        Ok(Completion {
            text: self.complete_prompt(request.prompt)?,
            cache_hit: false,
        })
    }
}

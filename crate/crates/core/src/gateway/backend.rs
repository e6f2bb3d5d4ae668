//! Chat-completion backends: an HTTP client for OpenAI-style endpoints and a
//! deterministic mock keyed by prompt hash.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_RETRIES_LIMIT: u32 = 5;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("no fixture for prompt hash {hash}")]
    NoFixture { hash: String },
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("cannot read mock fixtures from {path}: {message}")]
    Fixtures { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend_kind: BackendKind,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub request_timeout_ms: u64,
    pub api_key_env_var: String,
    pub endpoint: String,
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further retry.
    pub retry_base_delay_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            backend_kind: BackendKind::Mock,
            model_name: "gpt-4o".to_string(),
            temperature: 0.0,
            max_retries: 3,
            request_timeout_ms: 120_000,
            api_key_env_var: "OPENAI_API_KEY".to_string(),
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retry_base_delay_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(GatewayError::Config(format!(
                "max_retries must be <= {MAX_RETRIES_LIMIT}, got {}",
                self.max_retries
            )));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be >= 1".into()));
        }
        if self.model_name.trim().is_empty() {
            return Err(GatewayError::Config("model_name is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatExchange {
    pub rendered_prompt: String,
    pub raw_response: String,
    pub attempt_count: u32,
    pub backend_kind: BackendKind,
}

/// Why a single attempt failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    Transient(String),
    Fatal(GatewayError),
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, prompt: &str) -> Result<String, AttemptError>;
}

/// SHA-256 of the prompt's UTF-8 bytes, lowercase hex.
pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Returns the fixture registered for a prompt's hash. Fixture directories
/// hold one `<hash>.txt` file per response.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    fixtures: BTreeMap<String, String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref();
        let fixtures_err = |message: String| GatewayError::Fixtures {
            path: dir.display().to_string(),
            message,
        };
        let mut fixtures = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| fixtures_err(e.to_string()))?;
        for entry in entries {
            let path = entry.map_err(|e| fixtures_err(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(hash) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| fixtures_err(format!("{}: {e}", path.display())))?;
            fixtures.insert(hash.to_string(), text);
        }
        Ok(Self { fixtures })
    }

    pub fn register(&mut self, prompt: &str, response: impl Into<String>) -> String {
        let hash = prompt_hash(prompt);
        self.fixtures.insert(hash.clone(), response.into());
        hash
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }

    /// Writes every fixture as `<hash>.txt` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (hash, text) in &self.fixtures {
            std::fs::write(dir.join(format!("{hash}.txt")), text)?;
        }
        Ok(())
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, prompt: &str) -> Result<String, AttemptError> {
        let hash = prompt_hash(prompt);
        self.fixtures
            .get(&hash)
            .cloned()
            .ok_or(AttemptError::Fatal(GatewayError::NoFixture { hash }))
    }
}

/// Raw HTTP response as seen by [`HttpChatBackend`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// The wire underneath [`HttpChatBackend`]; replaceable for fault injection.
pub trait Transport: Send + Sync {
    /// `Err` means the request never produced an HTTP response.
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration) -> Result<HttpReply, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut response = agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpChatBackend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Self {
        Self::with_transport(config, Box::new(UreqTransport))
    }

    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        Self { config, transport }
    }

    fn request_body(&self, prompt: &str) -> String {
        serde_json::json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
        .to_string()
    }
}

fn completion_text(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.get("choices")?.get(0)?.get("message")?.get("content")?.as_str().map(str::to_string)
}

impl ChatBackend for HttpChatBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpChat
    }

    fn send(&self, prompt: &str) -> Result<String, AttemptError> {
        let key = std::env::var(&self.config.api_key_env_var).map_err(|_| {
            AttemptError::Fatal(GatewayError::Config(format!(
                "environment variable {} is not set",
                self.config.api_key_env_var
            )))
        })?;
        let reply = self
            .transport
            .post_json(
                &self.config.endpoint,
                &key,
                &self.request_body(prompt),
                Duration::from_millis(self.config.request_timeout_ms),
            )
            .map_err(AttemptError::Transient)?;
        match reply.status {
            200..=299 => completion_text(&reply.body).ok_or_else(|| {
                AttemptError::Fatal(GatewayError::Rejected("response has no choices[0].message.content".into()))
            }),
            429 | 500..=599 => Err(AttemptError::Transient(format!("HTTP {}", reply.status))),
            status => Err(AttemptError::Fatal(GatewayError::Rejected(format!("HTTP {status}: {}", reply.body)))),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().expect("limiter poisoned") += 1;
        self.limiter.freed.notify_one();
    }
}

/// Backend plus retry policy. Cheap to clone; clones share the limiter.
#[derive(Clone)]
pub struct Gateway {
    config: BackendConfig,
    backend: Arc<dyn ChatBackend>,
    limiter: Option<Arc<Limiter>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("backend", &self.backend.kind())
            .finish()
    }
}

impl Gateway {
    /// Builds the backend named by the config. Mock backends read their
    /// fixtures from `mock_fixtures`.
    pub fn from_config(config: BackendConfig, mock_fixtures: Option<&Path>) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Arc<dyn ChatBackend> = match config.backend_kind {
            BackendKind::Mock => {
                let dir = mock_fixtures
                    .ok_or_else(|| GatewayError::Config("mock backend needs a fixture directory".into()))?;
                Arc::new(MockBackend::from_dir(dir)?)
            }
            BackendKind::HttpChat => Arc::new(HttpChatBackend::new(config.clone())),
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: BackendConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let limiter = match backend.kind() {
            BackendKind::HttpChat => Some(Arc::new(Limiter::new(config.max_in_flight))),
            BackendKind::Mock => None,
        };
        Ok(Self {
            config,
            backend,
            limiter,
        })
    }

    pub fn mock(backend: MockBackend) -> Self {
        Self::with_backend(BackendConfig::mock(), Arc::new(backend)).expect("default config is valid")
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn complete(&self, prompt: &str) -> Result<ChatExchange, GatewayError> {
        let _permit = self.limiter.as_ref().map(|l| l.acquire());
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.send(prompt) {
                Ok(raw_response) => {
                    return Ok(ChatExchange {
                        rendered_prompt: prompt.to_string(),
                        raw_response,
                        attempt_count: attempt,
                        backend_kind: self.backend.kind(),
                    })
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(message)) => {
                    if attempt >= max_attempts {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("attempt {attempt} failed: {message}; retrying");
                    let delay = self.config.retry_base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
    }
}

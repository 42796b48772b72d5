//! Prompt execution gateway.
//!
//! One contract ([`PromptExecutor`]) with three interchangeable backends:
//!
//! * [`LiveBackend`]: OpenAI-compatible `POST /v1/chat/completions` with
//!   bounded exponential-backoff retries;
//! * [`ScriptedBackend`]: canned responses keyed by `(tag, digest)` with an
//!   optional rule-based responder, a pure function of the request;
//! * [`ReplayBackend`]: an append-only record/replay cache in front of any
//!   other executor.
//!
//! [`execute_structured`] layers local output validation with corrective
//! re-prompting on top of any executor.

mod live;
mod replay;
mod scripted;
mod structured;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use live::{LiveBackend, LiveConfig, RetryPolicy, DEFAULT_API_KEY_ENV};
pub use replay::{CacheMode, ReplayBackend, ReplayCache};
pub use scripted::{Responder, ScriptedBackend, ScriptedEntry, ScriptedTable};
pub use structured::{
    execute_structured, execute_structured_with, parse_structured, ResponseSchema, RoleProfile, StepSpec,
    StructuredOutput, StructuredValue, DEFAULT_PARSE_ATTEMPTS,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },
    #[error("replay cache miss for request digest {0}")]
    CacheMiss(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed output for {tag} after {} attempt(s): {last_error}", attempts.len())]
    MalformedOutput {
        tag: String,
        attempts: Vec<String>,
        last_error: String,
    },
    #[error("cache i/o error: {0}")]
    CacheIo(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub model_id: String,
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub request_seed: Option<u64>,
    /// Pipeline step label, e.g. `stage1-extract`. Not part of the digest.
    pub tag: String,
}

impl PromptRequest {
    pub fn new(model_id: &str, tag: &str, system_message: impl Into<String>, user_message: impl Into<String>) -> Self {
        PromptRequest {
            model_id: model_id.to_string(),
            system_message: system_message.into(),
            user_message: user_message.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            request_seed: None,
            tag: tag.to_string(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.request_seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.system_message.trim().is_empty() || self.user_message.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over `(model_id, system, user, temperature, max_tokens,
    /// request_seed)`; the tag is bookkeeping and excluded.
    pub fn cache_key(&self) -> String {
        cache_key(self)
    }
}

pub fn cache_key(request: &PromptRequest) -> String {
    let mut hasher = Sha256::new();
    let mut field = |bytes: &[u8]| {
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    };
    field(request.model_id.as_bytes());
    field(request.system_message.as_bytes());
    field(request.user_message.as_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    field(&request.max_tokens.to_le_bytes());
    match request.request_seed {
        Some(seed) => {
            field(&[1]);
            field(&seed.to_le_bytes());
        }
        None => field(&[0]),
    }
    hex::encode(hasher.finalize())
}

/// Model identity and sampling parameters shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams { model_id: "gpt-4o-mini".into(), temperature: DEFAULT_TEMPERATURE, max_tokens: DEFAULT_MAX_TOKENS }
    }
}

impl ModelParams {
    pub fn request(&self, tag: &str, system: impl Into<String>, user: impl Into<String>, seed: u64) -> PromptRequest {
        let mut request = PromptRequest::new(&self.model_id, tag, system, user).with_seed(seed);
        request.temperature = self.temperature;
        request.max_tokens = self.max_tokens;
        request
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

impl PromptResponse {
    pub fn scripted(text: impl Into<String>) -> Self {
        PromptResponse {
            text: text.into(),
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
            backend: BackendKind::Scripted,
        }
    }
}

/// Executes one prompt. Implementations must be safe to call concurrently.
pub trait PromptExecutor: Send + Sync {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError>;
}

impl<E: PromptExecutor + ?Sized> PromptExecutor for std::sync::Arc<E> {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        (**self).execute(request)
    }
}

impl<E: PromptExecutor + ?Sized> PromptExecutor for &E {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        (**self).execute(request)
    }
}

/// Caps the number of concurrent `execute` calls on the wrapped executor.
pub struct InFlightLimit<E> {
    inner: E,
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl<E> InFlightLimit<E> {
    pub fn new(inner: E, limit: usize) -> Self {
        InFlightLimit {
            inner,
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<E: PromptExecutor> PromptExecutor for InFlightLimit<E> {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        {
            let mut active = self.active.lock().expect("in-flight lock");
            while *active >= self.limit {
                active = self.freed.wait(active).expect("in-flight lock");
            }
            *active += 1;
        }
        let result = self.inner.execute(request);
        *self.active.lock().expect("in-flight lock") -= 1;
        self.freed.notify_one();
        result
    }
}

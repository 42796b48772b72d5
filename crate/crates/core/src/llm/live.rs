//! OpenAI-compatible chat-completions client.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendKind, GatewayError, PromptExecutor, PromptRequest, PromptResponse};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

/// `max_attempts` counts every HTTP call, so the default of 3 allows two
/// retries after the first failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff_ms: 500, max_backoff_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: usize) -> Duration {
        let factor = 1u64 << retry.min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Server root, e.g. `https://api.openai.com`; `/v1/chat/completions` is appended.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            base_url: "https://api.openai.com".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            retry: RetryPolicy::default(),
            timeout_secs: 120,
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

enum Attempt {
    Done(PromptResponse),
    Retryable(String),
    Fatal(String),
}

impl LiveBackend {
    /// Reads the API key from `config.api_key_env`. A missing key is allowed
    /// for local servers that do not authenticate.
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(LiveBackend { config, api_key, client, calls: AtomicUsize::new(0) })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    /// HTTP calls issued so far, retries included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn request_body(request: &PromptRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_message},
                {"role": "user", "content": request.user_message},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.request_seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, request: &PromptRequest, started: Instant) -> Attempt {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut call = self.client.post(self.endpoint()).json(&Self::request_body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = match call.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(format!("transport: {e}")),
        };
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retryable(format!("HTTP {status}"));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Attempt::Fatal(format!("HTTP {status}: {}", body.chars().take(300).collect::<String>()));
        }
        let body: Value = match response.json() {
            Ok(v) => v,
            Err(e) => return Attempt::Retryable(format!("undecodable body: {e}")),
        };
        let Some(text) = body.pointer("/choices/0/message/content").and_then(Value::as_str) else {
            return Attempt::Fatal("response has no choices[0].message.content".into());
        };
        let usage = |k: &str| body.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
        Attempt::Done(PromptResponse {
            text: text.to_string(),
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
            latency_ms: started.elapsed().as_millis() as u64,
            backend: BackendKind::Live,
        })
    }
}

impl PromptExecutor for LiveBackend {
    fn execute(&self, request: &PromptRequest) -> Result<PromptResponse, GatewayError> {
        request.validate()?;
        let started = Instant::now();
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            match self.attempt(request, started) {
                Attempt::Done(response) => return Ok(response),
                Attempt::Fatal(message) => return Err(GatewayError::Backend { attempts: attempt + 1, message }),
                Attempt::Retryable(message) => {
                    log::warn!("{} attempt {} failed: {message}", request.tag, attempt + 1);
                    last = message;
                }
            }
        }
        Err(GatewayError::Backend { attempts, message: last })
    }
}

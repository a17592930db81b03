//! OpenAI-compatible chat-completions over blocking HTTP.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, LlmError, LlmRequest, LlmResponse};

pub const DEFAULT_API_KEY_ENV: &str = "UNSPSC_LLM_API_KEY";

/// Exponential backoff with full jitter. Only throttling (429), 5xx and
/// timeouts are retried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1), max_delay: Duration::from_secs(60) }
    }
}

impl RetryPolicy {
    /// Upper bound of the sleep before retry number `retry` (1-based).
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    fn sleep_before(&self, retry: u32) {
        let ceiling = self.backoff_ceiling(retry);
        if ceiling.is_zero() {
            return;
        }
        let jittered = rand::rng().random_range(0..=ceiling.as_micros() as u64);
        std::thread::sleep(Duration::from_micros(jittered));
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub api_key: String,
    /// `Authorization` sends `Bearer <key>`; any other name (e.g. Azure's
    /// `api-key`) sends the bare key.
    pub auth_header: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            auth_header: "Authorization".into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the credential from `env_var`.
    pub fn from_env(endpoint: &str, env_var: &str) -> Result<Self, LlmError> {
        let key = std::env::var(env_var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| LlmError::Config(format!("environment variable {env_var} is not set; export the API key there")))?;
        Ok(Self::new(endpoint, key))
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    id: String,
}

enum Attempt {
    Done(Result<LlmResponse, LlmError>),
    Throttled,
    ServerError(u16, String),
    TimedOut,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, LlmError> {
        let endpoint = config.endpoint.trim();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(LlmError::Config(format!("endpoint {endpoint:?} is not an http(s) URL")));
        }
        if config.api_key.trim().is_empty() {
            return Err(LlmError::Config("empty API key".into()));
        }
        if config.retry.max_attempts == 0 {
            return Err(LlmError::Config("retry policy needs at least one attempt".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!("openai:{endpoint}");
        Ok(Self { config, agent, id })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn request_body(request: &LlmRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let auth_value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
            format!("Bearer {}", self.config.api_key)
        } else {
            self.config.api_key.clone()
        };
        let started = Instant::now();
        let sent = self
            .agent
            .post(self.config.endpoint.trim())
            .header(self.config.auth_header.as_str(), auth_value.as_str())
            .send_json(body);
        let mut response = match sent {
            Ok(r) => r,
            Err(e) if is_timeout(&e) => return Attempt::TimedOut,
            Err(e) => return Attempt::Done(Err(LlmError::TransportError(e.to_string()))),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) if is_timeout(&e) => return Attempt::TimedOut,
            Err(e) => return Attempt::Done(Err(LlmError::TransportError(e.to_string()))),
        };
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        match status {
            200..=299 => Attempt::Done(parse_completion(&text, latency_ms, &self.id)),
            401 | 403 => Attempt::Done(Err(LlmError::AuthFailed(status))),
            429 => Attempt::Throttled,
            500..=599 => Attempt::ServerError(status, text),
            _ => Attempt::Done(Err(LlmError::BackendError { status, body: truncate_body(&text) })),
        }
    }
}

fn is_timeout(e: &ureq::Error) -> bool {
    match e {
        ureq::Error::Timeout(_) => true,
        ureq::Error::Io(io) => matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock),
        _ => false,
    }
}

fn truncate_body(body: &str) -> String {
    body.chars().take(500).collect()
}

/// Reads the first choice of a chat-completions response.
pub(crate) fn parse_completion(body: &str, latency_ms: f64, backend_id: &str) -> Result<LlmResponse, LlmError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| LlmError::BackendError { status: 200, body: format!("invalid JSON ({e}): {}", truncate_body(body)) })?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::BackendError { status: 200, body: format!("no choices: {}", truncate_body(body)) })?;
    let finish_reason = choice.get("finish_reason").and_then(Value::as_str).unwrap_or("unknown").to_string();
    let text = choice.pointer("/message/content").and_then(Value::as_str);
    let text = match (text, finish_reason.as_str()) {
        (Some(t), _) => t.to_string(),
        (None, "stop") => {
            return Err(LlmError::BackendError { status: 200, body: "finish_reason stop without message content".into() })
        }
        (None, _) => String::new(),
    };
    let usage = value.get("usage");
    let tokens = |field: &str| usage.and_then(|u| u.get(field)).and_then(Value::as_u64).unwrap_or(0);
    Ok(LlmResponse {
        text,
        finish_reason,
        prompt_tokens: tokens("prompt_tokens"),
        completion_tokens: tokens("completion_tokens"),
        latency_ms,
        backend_id: backend_id.to_string(),
    })
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let body = Self::request_body(request);
        let policy = &self.config.retry;
        let mut last = LlmError::Timeout(0);
        for attempt in 1..=policy.max_attempts {
            if attempt > 1 {
                policy.sleep_before(attempt - 1);
            }
            last = match self.attempt(&body) {
                Attempt::Done(result) => return result,
                Attempt::Throttled => LlmError::RateLimited(attempt),
                Attempt::TimedOut => LlmError::Timeout(attempt),
                Attempt::ServerError(status, body) => LlmError::BackendError { status, body: truncate_body(&body) },
            };
            log::debug!("{}: attempt {attempt}/{} failed: {last}", self.id, policy.max_attempts);
        }
        Err(last)
    }
}

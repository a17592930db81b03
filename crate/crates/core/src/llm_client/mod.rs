//! Chat-completion backends and the batch runner.
//!
//! [`Backend`] is implemented by [`RemoteBackend`] (OpenAI-compatible HTTP)
//! and [`MockBackend`] (deterministic, offline). [`classify_batch`] fans a
//! record list out over a backend with bounded concurrency and the response cache.

mod batch;
mod mock;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{classify_batch, BatchParams, RawResult};
pub use mock::{mock_complete, CorruptionMode, MockBackend, MockOracleConfig, REFUSAL_TEXT};
pub use remote::{RemoteBackend, RemoteConfig, RetryPolicy, DEFAULT_API_KEY_ENV};

use crate::prompt::Message;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 64;
pub const DEFAULT_TEMPERATURES: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum LlmError {
    #[error("credential rejected (HTTP {0})")]
    AuthFailed(u16),
    #[error("rate limited after {0} attempts")]
    RateLimited(u32),
    #[error("timed out after {0} attempts")]
    Timeout(u32),
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("backend error: HTTP {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("mock oracle has no record {0:?}")]
    UnknownRecordId(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl LlmError {
    /// Errors that will recur on every request until the configuration changes.
    pub fn is_configuration(&self) -> bool {
        matches!(self, LlmError::AuthFailed(_) | LlmError::Config(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Not sent over the wire; the mock backend keys its oracle on it.
    #[serde(skip)]
    pub record_id: Option<String>,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: f64,
    pub backend_id: String,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        (**self).complete(request)
    }
}

/// Validates the request, then sends it to `backend`.
pub fn complete(request: &LlmRequest, backend: &dyn Backend) -> Result<LlmResponse, LlmError> {
    request.validate()?;
    backend.complete(request)
}

/// Wraps a backend and records call counts and peak concurrency.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0), in_flight: AtomicUsize::new(0), peak_in_flight: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.peak_in_flight.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let result = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

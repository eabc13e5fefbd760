//! Single point of contact with language models.
//!
//! A [`Gateway`] wraps a [`Backend`] (HTTP chat-completions or a deterministic
//! scripted double) with a disk cache, a bounded retry policy, an in-flight
//! request limiter, and a JSON-lines audit log. With the scripted backend the
//! whole pipeline is a pure function of (config, data, seeds).

pub mod audit;
pub mod cache;
pub mod http;
pub mod scripted;

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub use audit::{AuditEntry, AuditLog};
pub use cache::DiskCache;
pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{CountingBackend, FnBackend, Matcher, Rule, ScriptedBackend};

/// One completion request. `request_tag` names the pipeline stage issuing the
/// call (observation, criteria, multi_score, ...) for logs and call counting.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_id: String,
    pub request_tag: String,
}

impl LlmRequest {
    fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Config("request prompt is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

/// How a backend call failed, deciding retry eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Connection, timeout, or 5xx class; retried.
    Transport,
    /// 429 class; retried.
    RateLimit,
    /// Anything else (bad request, auth, malformed body); not retried.
    Fatal,
}

#[derive(Debug, Clone)]
pub struct BackendFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendFailure {
    pub fn transport(message: impl Into<String>) -> Self {
        BackendFailure {
            kind: FailureKind::Transport,
            message: message.into(),
        }
    }

    pub fn rate_limit(message: impl Into<String>) -> Self {
        BackendFailure {
            kind: FailureKind::RateLimit,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        BackendFailure {
            kind: FailureKind::Fatal,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        BackendReply {
            text: text.into(),
            ..Default::default()
        }
    }
}

/// A completion provider. Implementations must be safe to call concurrently.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure>;
}

/// Lets tests keep a handle to a backend (e.g. a counter) after the gateway
/// takes ownership.
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete_raw(&self, request: &LlmRequest) -> std::result::Result<BackendReply, BackendFailure> {
        (**self).complete_raw(request)
    }
}

/// Bounded exponential backoff. Delays double per retry, so they are
/// non-decreasing; total attempts never exceed `max_attempts`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, next_attempt: u32) -> Duration {
        // attempt 2 waits base, attempt 3 waits 2*base, ...
        let factor = 1u64 << (next_attempt.saturating_sub(2)).min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor))
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Limiter {
            permits: Mutex::new(permits),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut permits = self.permits.lock().expect("limiter poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter poisoned");
        }
        *permits -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.limiter.permits.lock().expect("limiter poisoned");
        *permits += 1;
        self.limiter.available.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<DiskCache>,
    audit: Option<AuditLog>,
    retry: RetryPolicy,
    limiter: Option<Limiter>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: None,
            audit: None,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Caps concurrent backend calls; cache hits bypass the limit.
    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limiter = (limit > 0).then(|| Limiter::new(limit));
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<LlmResponse> {
        request.validate()?;
        let key = cache::cache_key(request);
        if let Some(cache) = &self.cache {
            if let Some(text) = cache.get(&key)? {
                self.record_audit(request, &key, true, 0, &BackendReply::text(&text), 0)?;
                return Ok(LlmResponse {
                    text,
                    from_cache: true,
                    latency_ms: 0,
                });
            }
        }

        let started = Instant::now();
        let (reply, attempts) = self.call_with_retry(request)?;
        let latency_ms = started.elapsed().as_millis() as u64;

        if reply.text.trim().is_empty() {
            return Err(Error::EmptyCompletion {
                request_tag: request.request_tag.clone(),
            });
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, request, &reply.text)?;
        }
        self.record_audit(request, &key, false, latency_ms, &reply, attempts)?;
        Ok(LlmResponse {
            text: reply.text,
            from_cache: false,
            latency_ms,
        })
    }

    fn call_with_retry(&self, request: &LlmRequest) -> Result<(BackendReply, u32)> {
        let _guard = self.limiter.as_ref().map(|l| l.acquire());
        let mut last_failure: Option<BackendFailure> = None;
        for attempt in 1..=self.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.delay_before(attempt));
            }
            match self.backend.complete_raw(request) {
                Ok(reply) => return Ok((reply, attempt)),
                Err(failure) => match failure.kind {
                    FailureKind::Fatal => {
                        return Err(Error::Gateway(format!(
                            "backend '{}': {}",
                            self.backend.name(),
                            failure.message
                        )))
                    }
                    FailureKind::Transport | FailureKind::RateLimit => {
                        last_failure = Some(failure);
                    }
                },
            }
        }
        let failure = last_failure.expect("at least one attempt was made");
        let attempts = self.retry.max_attempts;
        Err(match failure.kind {
            FailureKind::RateLimit => Error::RateLimitExhausted {
                attempts,
                message: failure.message,
            },
            _ => Error::GatewayExhausted {
                attempts,
                message: failure.message,
            },
        })
    }

    fn record_audit(
        &self,
        request: &LlmRequest,
        key: &str,
        from_cache: bool,
        latency_ms: u64,
        reply: &BackendReply,
        attempts: u32,
    ) -> Result<()> {
        if let Some(audit) = &self.audit {
            audit.record(&AuditEntry {
                tag: request.request_tag.clone(),
                model_id: request.model_id.clone(),
                prompt_sha256: key.to_string(),
                from_cache,
                latency_ms,
                attempts,
                prompt_tokens: reply.prompt_tokens,
                completion_tokens: reply.completion_tokens,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) fn test_request(prompt: &str, tag: &str) -> LlmRequest {
    LlmRequest {
        prompt: prompt.to_string(),
        temperature: 0.0,
        max_tokens: 1024,
        model_id: "test-model".to_string(),
        request_tag: tag.to_string(),
    }
}

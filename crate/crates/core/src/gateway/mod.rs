//! Access to a completion-style language model.
//!
//! [`Gateway`] sits in front of a [`Transport`] (live HTTP, scripted stub, or
//! synthetic fixture model) and a content-addressed [`ResponseCache`]. Every
//! reply body is cached verbatim under [`cache_key`], so a warm cache replays
//! a run exactly, stochastic samples included.

mod cache;
mod http;
mod stub;
mod wire;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::{BackendConfig, HttpTransport};
pub use stub::{ScriptChoice, ScriptRule, ScriptedTransport, SyntheticTransport};
pub use wire::{parse_reply, CompletionRequest};

pub const MAX_TOP_LOGPROBS: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub n_responses: u32,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub top_logprobs: u8,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            n_responses: 1,
            max_tokens: 128,
            stop_sequences: Vec::new(),
            top_logprobs: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!("temperature {} outside [0, 1]", self.temperature)));
        }
        if self.n_responses == 0 || self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("n_responses and max_tokens must be at least 1".into()));
        }
        if self.top_logprobs > MAX_TOP_LOGPROBS {
            return Err(GatewayError::InvalidParams(format!(
                "top_logprobs {} exceeds {MAX_TOP_LOGPROBS}",
                self.top_logprobs
            )));
        }
        Ok(())
    }

    /// The "best n" responses for a temperature: 1 when greedy, 3 otherwise.
    pub fn responses_for_temperature(temperature: f64) -> u32 {
        if temperature > 0.0 {
            3
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    /// Per generated token: alternatives sorted by descending logprob.
    pub top_alternatives: Vec<Vec<(String, f64)>>,
    pub finish_reason: FinishReason,
}

impl Choice {
    pub fn mean_logprob(&self) -> Option<f64> {
        if self.token_logprobs.is_empty() {
            None
        } else {
            Some(self.token_logprobs.iter().sum::<f64>() / self.token_logprobs.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub choices: Vec<Choice>,
}

/// Orders samples best-first by mean token logprob. Choices without logprobs
/// sort last; ties keep backend order.
pub fn rank_choices(choices: &mut [Choice]) {
    choices.sort_by(|a, b| {
        let (a, b) = (a.mean_logprob(), b.mean_logprob());
        match (a, b) {
            (Some(a), Some(b)) => b.total_cmp(&a),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    entries: Vec<(String, f64)>,
}

impl TokenDistribution {
    /// Builds a distribution from `(token, logprob)` pairs.
    pub fn from_logprobs(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self, GatewayError> {
        Self::from_probabilities(pairs.into_iter().map(|(t, lp)| (t, lp.exp())))
    }

    pub fn from_probabilities(pairs: impl IntoIterator<Item = (String, f64)>) -> Result<Self, GatewayError> {
        let mut entries: Vec<_> = pairs.into_iter().collect();
        if let Some((t, p)) = entries.iter().find(|(_, p)| !(*p > 0.0 && *p <= 1.0)) {
            return Err(GatewayError::MalformedBackendReply(format!("probability {p} for `{t}` outside (0, 1]")));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if total > 1.0 + 1e-9 {
            return Err(GatewayError::MalformedBackendReply(format!("probabilities sum to {total}")));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rate limited (retry after {retry_after_ms:?} ms)")]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),
    #[error("no cached reply for key {0} and live calls are disabled")]
    CacheMiss(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("cache i/o: {0}")]
    CacheIo(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::BackendUnavailable(_) | GatewayError::RateLimited { .. })
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::BackendUnavailable(_) => "backend_unavailable",
            GatewayError::RateLimited { .. } => "rate_limited",
            GatewayError::AuthFailure(_) => "auth_failure",
            GatewayError::MalformedBackendReply(_) => "malformed_backend_reply",
            GatewayError::CacheMiss(_) => "cache_miss",
            GatewayError::InvalidParams(_) => "invalid_params",
            GatewayError::CacheIo(_) => "cache_io",
        }
    }
}

/// Content address of a request: hex SHA-256 over the prompt bytes and every
/// generation parameter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn cache_key(prompt: &str, params: &GenerationParams) -> CacheKey {
    #[derive(Serialize)]
    struct Keyed<'a> {
        version: u8,
        prompt: &'a str,
        params: &'a GenerationParams,
    }
    let canonical = serde_json::to_vec(&Keyed {
        version: 1,
        prompt,
        params,
    })
    .expect("params serialize");
    CacheKey(hex::encode(Sha256::digest(&canonical)))
}

/// Anything that can carry one request to a model and hand back the raw
/// JSON reply body.
pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    fn delay_for(&self, attempt: u32, error: &GatewayError) -> Duration {
        if let GatewayError::RateLimited {
            retry_after_ms: Some(ms),
        } = error
        {
            return Duration::from_millis(*ms);
        }
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }
}

struct Permits {
    free: Mutex<usize>,
    available: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.available.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.available.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub live_calls: u64,
    pub cache_hits: u64,
}

pub struct Gateway {
    transport: Option<Arc<dyn Transport>>,
    cache: Option<ResponseCache>,
    cache_only: bool,
    model: String,
    retry: RetryPolicy,
    permits: Permits,
    live_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("has_transport", &self.transport.is_some())
            .field("cache", &self.cache)
            .field("cache_only", &self.cache_only)
            .field("model", &self.model)
            .finish()
    }
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport: Some(transport),
            cache: None,
            cache_only: false,
            model: "default".to_string(),
            retry: RetryPolicy::default(),
            permits: Permits::new(4),
            live_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    /// A gateway that can only answer from `cache`.
    pub fn replay_only(cache: ResponseCache) -> Self {
        Self {
            transport: None,
            cache: Some(cache),
            cache_only: true,
            model: "replay".to_string(),
            retry: RetryPolicy::none(),
            permits: Permits::new(1),
            live_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Refuse live calls; cache misses become [`GatewayError::CacheMiss`].
    pub fn cache_only(mut self, on: bool) -> Self {
        self.cache_only = on;
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.permits = Permits::new(n);
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            live_calls: self.live_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    pub fn is_cached(&self, prompt: &str, params: &GenerationParams) -> bool {
        self.cache
            .as_ref()
            .is_some_and(|c| c.contains(&cache_key(prompt, params)))
    }

    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        params.validate()?;
        let key = cache_key(prompt, params);
        if let Some(cache) = &self.cache {
            if let Some(body) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return parse_reply(&body, params);
            }
        }
        let transport = match (&self.transport, self.cache_only) {
            (Some(t), false) => t,
            _ => return Err(GatewayError::CacheMiss(key.to_string())),
        };
        let request = CompletionRequest::new(&self.model, prompt, params);
        let body = self.send_with_retry(transport.as_ref(), &request)?;
        let completion = parse_reply(&body, params)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &body)?;
        }
        Ok(completion)
    }

    fn send_with_retry(&self, transport: &dyn Transport, request: &CompletionRequest) -> Result<String, GatewayError> {
        let _permit = self.permits.acquire();
        let mut attempt = 0;
        loop {
            self.live_calls.fetch_add(1, Ordering::Relaxed);
            match transport.send(request) {
                Ok(body) => return Ok(body),
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.delay_for(attempt, &e));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Distribution over the single next token, from a one-token request.
    pub fn first_token_distribution(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<TokenDistribution, GatewayError> {
        if params.top_logprobs == 0 {
            return Err(GatewayError::InvalidParams("top_logprobs must be at least 1".into()));
        }
        let params = GenerationParams {
            max_tokens: 1,
            n_responses: 1,
            ..params.clone()
        };
        let completion = self.complete(prompt, &params)?;
        let choice = completion
            .choices
            .first()
            .ok_or_else(|| GatewayError::MalformedBackendReply("no choices".into()))?;
        match choice.top_alternatives.first() {
            Some(alts) if !alts.is_empty() => TokenDistribution::from_logprobs(alts.iter().cloned()),
            _ => match (choice.tokens.first(), choice.token_logprobs.first()) {
                (Some(t), Some(lp)) => TokenDistribution::from_logprobs([(t.clone(), *lp)]),
                _ => Err(GatewayError::MalformedBackendReply("no token alternatives in reply".into())),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenerationParams {
        GenerationParams {
            stop_sequences: vec!["(END TASK)".into()],
            ..GenerationParams::default()
        }
    }

    #[test]
    fn cache_key_is_deterministic_and_sensitive() {
        let p = params();
        assert_eq!(cache_key("prompt", &p), cache_key("prompt", &p));
        let warm = GenerationParams { temperature: 0.3, ..p.clone() };
        assert_ne!(cache_key("prompt", &p), cache_key("prompt", &warm));
        assert_ne!(cache_key("prompt", &p), cache_key("prompt ", &p));
        let more = GenerationParams { n_responses: 3, ..p.clone() };
        assert_ne!(cache_key("prompt", &p), cache_key("prompt", &more));
        let stops = GenerationParams { stop_sequences: vec![], ..p.clone() };
        assert_ne!(cache_key("prompt", &p), cache_key("prompt", &stops));
        assert_eq!(cache_key("prompt", &p).as_str().len(), 64);
    }

    #[test]
    fn params_validation() {
        assert!(params().validate().is_ok());
        assert!(GenerationParams { temperature: 1.5, ..params() }.validate().is_err());
        assert!(GenerationParams { n_responses: 0, ..params() }.validate().is_err());
        assert!(GenerationParams { top_logprobs: 6, ..params() }.validate().is_err());
    }

    #[test]
    fn single_certain_token() {
        let d = TokenDistribution::from_logprobs([("Pick".to_string(), 0.0)]).unwrap();
        assert_eq!(d.entries(), [("Pick".to_string(), 1.0)]);
    }

    #[test]
    fn distribution_sorts_and_bounds_mass() {
        let d = TokenDistribution::from_probabilities(
            [("Put", 0.014), ("Pick", 0.48), ("Throw", 0.016), ("Take", 0.40), ("Remove", 0.03)]
                .map(|(t, p)| (t.to_string(), p)),
        )
        .unwrap();
        let tokens: Vec<_> = d.entries().iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(tokens, ["Pick", "Take", "Remove", "Throw", "Put"]);
        assert!((d.total_mass() - 0.94).abs() < 1e-12);
        assert!(TokenDistribution::from_probabilities([("a".to_string(), 0.7), ("b".to_string(), 0.7)]).is_err());
        assert!(TokenDistribution::from_probabilities([("a".to_string(), 0.0)]).is_err());
    }

    #[test]
    fn ranking_prefers_higher_mean_logprob() {
        let choice = |text: &str, lps: &[f64]| Choice {
            text: text.into(),
            tokens: lps.iter().map(|_| "x".to_string()).collect(),
            token_logprobs: lps.to_vec(),
            top_alternatives: vec![],
            finish_reason: FinishReason::Stop,
        };
        let mut choices = vec![choice("b", &[-1.0, -1.0]), choice("none", &[]), choice("a", &[-0.1, -0.3])];
        rank_choices(&mut choices);
        let order: Vec<_> = choices.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(order, ["a", "b", "none"]);
    }

    #[test]
    fn retry_delay_honors_server_hint_and_caps() {
        let policy = RetryPolicy::default();
        let limited = GatewayError::RateLimited { retry_after_ms: Some(1200) };
        assert_eq!(policy.delay_for(0, &limited), Duration::from_millis(1200));
        let down = GatewayError::BackendUnavailable("x".into());
        assert_eq!(policy.delay_for(0, &down), Duration::from_millis(500));
        assert_eq!(policy.delay_for(1, &down), Duration::from_millis(1000));
        assert_eq!(policy.delay_for(10, &down), Duration::from_secs(8));
    }
}

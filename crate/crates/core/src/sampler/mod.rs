//! Uniform sampling interface over the in-process toy model and a remote
//! chat-completions endpoint.

pub mod mock;
mod remote;
mod toy;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub use remote::{RemoteSampler, RemoteStats};
pub use toy::ToySampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Toy,
    Remote,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Backend::Toy),
            "remote" => Ok(Backend::Remote),
            other => Err(Error::validation(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`,
    /// capped. Non-decreasing in `retry`.
    pub fn delay(&self, retry: usize) -> Duration {
        let exp = (retry.saturating_sub(1)).min(32) as u32;
        let ms = self.backoff_base_ms.saturating_mul(1u64 << exp).min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub backend: Backend,
    /// Model name sent to the remote endpoint, or a label for the toy model.
    pub model: String,
    pub endpoint: Option<String>,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub n_per_request: usize,
    pub request_timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Remote jobs estimating more requests than this are refused unless
    /// `allow_over_ceiling` is set.
    pub request_ceiling: u64,
    pub allow_over_ceiling: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            backend: Backend::Toy,
            model: "toy".to_string(),
            endpoint: None,
            api_key_env: "UPFT_API_KEY".to_string(),
            temperature: 0.7,
            max_tokens: 64,
            n_per_request: 1,
            request_timeout_secs: 120,
            max_in_flight: 8,
            retry: RetryPolicy::default(),
            request_ceiling: 10_000,
            allow_over_ceiling: false,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::validation("max_tokens must be at least 1"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::validation("max_in_flight must be at least 1"));
        }
        if self.n_per_request == 0 {
            return Err(Error::validation("n_per_request must be at least 1"));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::validation("retry.max_attempts must be at least 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::validation("temperature must be >= 0"));
        }
        Ok(())
    }
}

/// One sampling call: `n` completions of `prompt`, optionally continuing a
/// partial response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    #[serde(default)]
    pub response_prefix: String,
    pub n: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, n: usize, max_tokens: usize, temperature: f64, seed: u64) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            response_prefix: String::new(),
            n,
            max_tokens,
            temperature,
            seed,
        }
    }

    pub fn continuing(mut self, prefix: impl Into<String>) -> Self {
        self.response_prefix = prefix.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Length,
    Stop,
}

/// Equality ignores `latency`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    /// Completion tokens reported by the API.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_tokens: Option<usize>,
    /// Set when one usage figure was shared across several choices.
    #[serde(default)]
    pub usage_apportioned: bool,
    pub finish_reason: FinishReason,
    #[serde(skip)]
    pub latency: Duration,
}

impl PartialEq for SampleResult {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
            && self.tokens == other.tokens
            && self.reported_tokens == other.reported_tokens
            && self.usage_apportioned == other.usage_apportioned
            && self.finish_reason == other.finish_reason
    }
}

impl SampleResult {
    pub fn from_tokens(tokens: Vec<TokenId>, text: String, finish_reason: FinishReason) -> Self {
        SampleResult {
            text,
            tokens: Some(tokens),
            reported_tokens: None,
            usage_apportioned: false,
            finish_reason,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub count: usize,
    /// True when the count is a whitespace estimate.
    pub approximate: bool,
}

/// Token ids when present, else the API-reported count, else a whitespace
/// count flagged as approximate.
pub fn count_tokens(result: &SampleResult) -> TokenCount {
    if let Some(t) = &result.tokens {
        return TokenCount {
            count: t.len(),
            approximate: false,
        };
    }
    match result.reported_tokens {
        Some(count) => TokenCount {
            count,
            approximate: false,
        },
        None => TokenCount {
            count: result.text.split_whitespace().count(),
            approximate: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerIdentity {
    pub backend: Backend,
    pub model: String,
    /// Whether identical seeds reproduce identical samples.
    pub reproducible: bool,
}

impl fmt::Display for SamplerIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.backend, self.model)
    }
}

pub trait Sampler: Send + Sync {
    fn sample_completions(&self, req: &CompletionRequest) -> Result<Vec<SampleResult>>;

    fn identity(&self) -> SamplerIdentity;

    /// Requests one call with `n` completions will issue.
    fn requests_for(&self, n: usize) -> u64 {
        n as u64
    }

    /// Cost guard hook; the toy backend always accepts.
    fn preflight(&self, _estimated_requests: u64) -> Result<()> {
        Ok(())
    }

    /// Client-side cut to at most `t` tokens.
    fn truncate(&self, result: &SampleResult, t: usize) -> SampleResult {
        truncate_result(result, t)
    }
}

/// Cuts a result to at most `t` tokens. Token bodies are cut exactly; text
/// bodies whose reported count exceeds `t` are cut to `t` whitespace words.
pub fn truncate_result(result: &SampleResult, t: usize) -> SampleResult {
    let mut out = result.clone();
    if let Some(tokens) = &result.tokens {
        if tokens.len() > t {
            let kept = tokens[..t].to_vec();
            out.text = crate::corpus::SyntheticVocab.decode(&kept);
            out.tokens = Some(kept);
            out.finish_reason = FinishReason::Length;
        }
        return out;
    }
    let count = count_tokens(result);
    if count.count > t {
        let words: Vec<&str> = result.text.split_whitespace().take(t).collect();
        out.text = words.join(" ");
        out.finish_reason = FinishReason::Length;
    }
    out
}

/// Counting semaphore bounding concurrent remote requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    permits: std::sync::Mutex<usize>,
    cv: std::sync::Condvar,
}

impl Semaphore {
    pub(crate) fn new(permits: usize) -> Self {
        Semaphore {
            permits: std::sync::Mutex::new(permits),
            cv: std::sync::Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

pub(crate) struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

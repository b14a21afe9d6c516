use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, CompletionRequest, FinishReason, SampleResult, Sampler, SamplerIdentity, SamplerSpec, Semaphore};
use crate::error::{Error, Result};

/// Counters observed by a [`RemoteSampler`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RemoteStats {
    pub requests_sent: usize,
    pub retries: usize,
    /// Every backoff slept, in the order they happened per request.
    pub backoffs_ms: Vec<u64>,
    pub completion_tokens: u64,
    pub prompt_tokens: u64,
}

/// Chat-completions client with bounded in-flight requests and retries.
///
/// Safe to share between threads: the in-flight cap holds across all
/// callers of one instance.
pub struct RemoteSampler {
    spec: SamplerSpec,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    permits: Arc<Semaphore>,
    stats: Mutex<RemoteStats>,
}

impl std::fmt::Debug for RemoteSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteSampler")
            .field("url", &self.url)
            .field("model", &self.spec.model)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(Vec<SampleResult>, u64, u64),
    Retry(String),
    Fatal(Error),
}

impl RemoteSampler {
    /// Reads the API key from the environment variable named in `api_key_env`.
    pub fn from_env(spec: SamplerSpec) -> Result<Self> {
        let key = std::env::var(&spec.api_key_env).map_err(|_| {
            Error::Precondition(format!(
                "environment variable {} with the API key is not set",
                spec.api_key_env
            ))
        })?;
        Self::with_api_key(spec, Some(key))
    }

    pub fn with_api_key(spec: SamplerSpec, api_key: Option<String>) -> Result<Self> {
        spec.validate()?;
        let endpoint = spec
            .endpoint
            .clone()
            .ok_or_else(|| Error::validation("remote sampler needs an endpoint URL"))?;
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(spec.request_timeout_secs))
            .max_idle_connections_per_host(spec.max_in_flight)
            .build();
        Ok(RemoteSampler {
            permits: Arc::new(Semaphore::new(spec.max_in_flight)),
            spec,
            url,
            api_key,
            agent,
            stats: Mutex::new(RemoteStats::default()),
        })
    }

    pub fn stats(&self) -> RemoteStats {
        self.stats.lock().unwrap().clone()
    }

    fn body(&self, req: &CompletionRequest, n: usize) -> Value {
        let mut messages = vec![json!({"role": "user", "content": req.prompt})];
        if !req.response_prefix.is_empty() {
            messages.push(json!({"role": "assistant", "content": req.response_prefix}));
        }
        json!({
            "model": self.spec.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "n": n,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.permits.acquire();
        self.stats.lock().unwrap().requests_sent += 1;
        let started = Instant::now();
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(body.clone()) {
            Ok(resp) => match resp.into_string() {
                Ok(raw) => match parse_response(&raw, started.elapsed()) {
                    Ok((results, completion, prompt)) => Attempt::Done(results, completion, prompt),
                    Err(e) => Attempt::Fatal(e),
                },
                Err(e) => Attempt::Retry(format!("reading body: {e}")),
            },
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", detail.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Attempt::Retry(msg)
                } else {
                    Attempt::Fatal(Error::Transport {
                        message: msg.clone(),
                        attempts: 1,
                        attempt_log: vec![msg],
                    })
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(format!("transport: {t}")),
        }
    }

    fn request_with_retries(&self, req: &CompletionRequest, n: usize) -> Result<Vec<SampleResult>> {
        let body = self.body(req, n);
        let mut log = Vec::new();
        let max = self.spec.retry.max_attempts;
        for attempt in 1..=max {
            match self.attempt(&body) {
                Attempt::Done(results, completion, prompt) => {
                    let mut s = self.stats.lock().unwrap();
                    s.completion_tokens += completion;
                    s.prompt_tokens += prompt;
                    return Ok(results);
                }
                Attempt::Fatal(Error::Transport {
                    message, attempt_log, ..
                }) => {
                    log.extend(attempt_log);
                    return Err(Error::Transport {
                        message,
                        attempts: attempt,
                        attempt_log: log,
                    });
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    if attempt == max {
                        log.push(format!("attempt {attempt}: {msg}"));
                        return Err(Error::Transport {
                            message: msg,
                            attempts: attempt,
                            attempt_log: log,
                        });
                    }
                    let delay = self.spec.retry.delay(attempt);
                    log.push(format!("attempt {attempt}: {msg}; retrying in {} ms", delay.as_millis()));
                    log::warn!("remote sampler attempt {attempt} failed: {msg}");
                    {
                        let mut s = self.stats.lock().unwrap();
                        s.retries += 1;
                        s.backoffs_ms.push(delay.as_millis() as u64);
                    }
                    thread::sleep(delay);
                }
            }
        }
        unreachable!("retry loop returns on the last attempt")
    }
}

/// Parses a chat-completions response. With several choices, the usage
/// figure is split across them (remainder to the first ones) so sums stay
/// exact.
fn parse_response(raw: &str, latency: Duration) -> Result<(Vec<SampleResult>, u64, u64)> {
    let protocol = |message: &str| Error::Protocol {
        message: message.to_string(),
        raw: raw.chars().take(2000).collect(),
    };
    let v: Value = serde_json::from_str(raw).map_err(|e| protocol(&format!("invalid JSON: {e}")))?;
    let choices = v["choices"].as_array().ok_or_else(|| protocol("missing choices array"))?;
    let completion = v["usage"]["completion_tokens"].as_u64();
    let prompt = v["usage"]["prompt_tokens"].as_u64().unwrap_or(0);
    let n = choices.len();
    let mut out = Vec::with_capacity(n);
    for (i, c) in choices.iter().enumerate() {
        let text = c["message"]["content"]
            .as_str()
            .ok_or_else(|| protocol("choice without message.content"))?
            .to_string();
        let finish_reason = match c["finish_reason"].as_str() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let reported_tokens = completion.map(|total| {
            let total = total as usize;
            total / n + usize::from(i < total % n)
        });
        out.push(SampleResult {
            text,
            tokens: None,
            reported_tokens,
            usage_apportioned: n > 1 && completion.is_some(),
            finish_reason,
            latency,
        });
    }
    Ok((out, completion.unwrap_or(0), prompt))
}

impl Sampler for RemoteSampler {
    fn sample_completions(&self, req: &CompletionRequest) -> Result<Vec<SampleResult>> {
        if req.n == 0 {
            return Ok(Vec::new());
        }
        let per = self.spec.n_per_request;
        let sizes: Vec<usize> = (0..req.n).step_by(per).map(|start| per.min(req.n - start)).collect();
        let outcomes: Vec<Result<Vec<SampleResult>>> = thread::scope(|scope| {
            let handles: Vec<_> = sizes
                .iter()
                .map(|&n| scope.spawn(move || self.request_with_retries(req, n)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(req.n);
        for o in outcomes {
            out.extend(o?);
        }
        Ok(out)
    }

    fn identity(&self) -> SamplerIdentity {
        SamplerIdentity {
            backend: Backend::Remote,
            model: self.spec.model.clone(),
            reproducible: false,
        }
    }

    fn requests_for(&self, n: usize) -> u64 {
        n.div_ceil(self.spec.n_per_request) as u64
    }

    fn preflight(&self, estimated_requests: u64) -> Result<()> {
        if estimated_requests > self.spec.request_ceiling && !self.spec.allow_over_ceiling {
            return Err(Error::Resource(format!(
                "cost guard: job needs about {estimated_requests} requests, ceiling is {} (set allow_over_ceiling to proceed)",
                self.spec.request_ceiling
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_choice() {
        let raw = r#"{"choices":[{"message":{"role":"assistant","content":"A 5 E"},"finish_reason":"stop"}],"usage":{"prompt_tokens":3,"completion_tokens":42}}"#;
        let (r, c, p) = parse_response(raw, Duration::ZERO).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].reported_tokens, Some(42));
        assert_eq!((c, p), (42, 3));
    }

    #[test]
    fn parse_apportions_usage() {
        let raw = r#"{"choices":[{"message":{"content":"a"}},{"message":{"content":"b"}},{"message":{"content":"c"}}],"usage":{"completion_tokens":10}}"#;
        let (r, _, _) = parse_response(raw, Duration::ZERO).unwrap();
        let counts: Vec<_> = r.iter().map(|x| x.reported_tokens.unwrap()).collect();
        assert_eq!(counts, vec![4, 3, 3]);
        assert!(r.iter().all(|x| x.usage_apportioned));
    }

    #[test]
    fn parse_missing_usage() {
        let raw = r#"{"choices":[{"message":{"content":"a b c"}}]}"#;
        let (r, _, _) = parse_response(raw, Duration::ZERO).unwrap();
        assert_eq!(r[0].reported_tokens, None);
    }

    #[test]
    fn malformed_is_protocol_error() {
        assert!(matches!(parse_response("{nope", Duration::ZERO), Err(Error::Protocol { .. })));
        assert!(matches!(parse_response(r#"{"choices":[{}]}"#, Duration::ZERO), Err(Error::Protocol { .. })));
    }

    #[test]
    fn cost_guard() {
        let spec = SamplerSpec {
            backend: Backend::Remote,
            endpoint: Some("http://127.0.0.1:9".into()),
            request_ceiling: 10,
            ..SamplerSpec::default()
        };
        let s = RemoteSampler::with_api_key(spec.clone(), None).unwrap();
        assert!(s.preflight(10).is_ok());
        assert!(matches!(s.preflight(11), Err(Error::Resource(_))));
        let s = RemoteSampler::with_api_key(
            SamplerSpec {
                allow_over_ceiling: true,
                ..spec
            },
            None,
        )
        .unwrap();
        assert!(s.preflight(11).is_ok());
    }

    #[test]
    fn missing_key_is_precondition() {
        let spec = SamplerSpec {
            backend: Backend::Remote,
            endpoint: Some("http://127.0.0.1:9".into()),
            api_key_env: "UPFT_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..SamplerSpec::default()
        };
        assert!(matches!(RemoteSampler::from_env(spec), Err(Error::Precondition(_))));
    }
}

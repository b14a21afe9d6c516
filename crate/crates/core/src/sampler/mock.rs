//! Instrumented chat-completions mock server for integration tests and
//! offline demos.
//!
//! Every request is answered with `n` copies of a fixed completion and a
//! usage block of `completion_tokens * n`. When the request's `max_tokens`
//! is smaller, each choice is cut to that many tokens (and words) with
//! finish reason `length`. The server records arrivals and
//! the peak number of concurrently handled requests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub completion: String,
    /// Per-choice completion tokens; `None` omits the usage block.
    pub completion_tokens: Option<u64>,
    pub prompt_tokens: u64,
    /// Time each request is held before answering.
    pub delay: Duration,
    /// The first `fail_first` requests get `fail_status`.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Answer with a body that is not valid JSON.
    pub malformed: bool,
    pub workers: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            completion: "3 + 4 = 7 ; A 7 E".to_string(),
            completion_tokens: Some(42),
            prompt_tokens: 5,
            delay: Duration::ZERO,
            fail_first: 0,
            fail_status: 503,
            malformed: false,
            workers: 16,
        }
    }
}

#[derive(Debug, Default)]
pub struct MockState {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicUsize,
    arrivals: Mutex<Vec<Instant>>,
    bodies: Mutex<Vec<Value>>,
}

pub struct MockServer {
    url: String,
    server: Arc<Server>,
    state: Arc<MockState>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(config: MockConfig) -> Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(|e| Error::Setup(format!("mock server: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Setup("mock server has no IP address".into()))?;
        let server = Arc::new(server);
        let state = Arc::new(MockState::default());
        let config = Arc::new(config);
        let workers = (0..config.workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let state = Arc::clone(&state);
                let config = Arc::clone(&config);
                thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(req, &state, &config);
                    }
                })
            })
            .collect();
        Ok(MockServer {
            url: format!("http://{addr}/v1"),
            server,
            state,
            workers,
        })
    }

    /// Base URL; the client appends `/chat/completions`.
    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn arrivals(&self) -> Vec<Instant> {
        self.state.arrivals.lock().unwrap().clone()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.state.bodies.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(mut req: tiny_http::Request, state: &MockState, config: &MockConfig) {
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let index = {
        let mut arrivals = state.arrivals.lock().unwrap();
        arrivals.push(Instant::now());
        state.requests.fetch_add(1, Ordering::SeqCst)
    };
    let mut raw = String::new();
    let _ = req.as_reader().read_to_string(&mut raw);
    let body: Value = serde_json::from_str(&raw).unwrap_or(Value::Null);
    let n = body["n"].as_u64().unwrap_or(1).max(1);
    let max_tokens = body["max_tokens"].as_u64().unwrap_or(u64::MAX);
    state.bodies.lock().unwrap().push(body);
    if !config.delay.is_zero() {
        thread::sleep(config.delay);
    }
    let (status, payload) = if index < config.fail_first {
        (config.fail_status, json!({"error": {"message": "injected failure"}}).to_string())
    } else if config.malformed {
        (200, "{\"choices\": [".to_string())
    } else {
        let cut = config.completion_tokens.is_some_and(|c| c > max_tokens);
        let content = if cut {
            let words: Vec<&str> = config.completion.split_whitespace().take(max_tokens as usize).collect();
            words.join(" ")
        } else {
            config.completion.clone()
        };
        let choices: Vec<Value> = (0..n)
            .map(|i| {
                json!({
                    "index": i,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": if cut { "length" } else { "stop" },
                })
            })
            .collect();
        let mut v = json!({"id": format!("mock-{index}"), "object": "chat.completion", "choices": choices});
        if let Some(c) = config.completion_tokens.map(|c| c.min(max_tokens)) {
            v["usage"] = json!({
                "prompt_tokens": config.prompt_tokens,
                "completion_tokens": c * n,
                "total_tokens": config.prompt_tokens + c * n,
            });
        }
        (200, v.to_string())
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let _ = req.respond(Response::from_string(payload).with_status_code(status).with_header(header));
}

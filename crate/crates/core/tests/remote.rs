use std::time::Duration;

use upft::corpus::{generate_synthetic, SyntheticTaskSpec};
use upft::pipeline::{build_rft, build_upft, Method, PipelineConfig};
use upft::sampler::mock::{MockConfig, MockServer};
use upft::sampler::{Backend, CompletionRequest, FinishReason, RemoteSampler, RetryPolicy, Sampler, SamplerSpec};
use upft::{Error, ErrorClass};

fn spec_for(server: &MockServer) -> SamplerSpec {
    SamplerSpec {
        backend: Backend::Remote,
        endpoint: Some(server.url().to_string()),
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 5,
            backoff_max_ms: 50,
        },
        ..SamplerSpec::default()
    }
}

fn request(n: usize) -> CompletionRequest {
    CompletionRequest::new("1+2=?", n, 16, 0.7, 0)
}

#[test]
fn client_error_is_not_retried() {
    let server = MockServer::start(MockConfig {
        fail_first: 100,
        fail_status: 400,
        ..MockConfig::default()
    })
    .unwrap();
    let s = RemoteSampler::with_api_key(spec_for(&server), None).unwrap();
    let err = s.sample_completions(&request(1)).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 1, .. }), "{err}");
    assert_eq!(server.requests(), 1);
    assert_eq!(s.stats().retries, 0);
}

#[test]
fn exhausted_retries_keep_attempt_log() {
    let server = MockServer::start(MockConfig {
        fail_first: 100,
        fail_status: 503,
        ..MockConfig::default()
    })
    .unwrap();
    let s = RemoteSampler::with_api_key(spec_for(&server), None).unwrap();
    match s.sample_completions(&request(1)).unwrap_err() {
        Error::Transport {
            attempts, attempt_log, ..
        } => {
            assert_eq!(attempts, 3);
            assert_eq!(attempt_log.len(), 3);
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(s.stats().backoffs_ms, vec![5, 10]);
}

#[test]
fn malformed_body_is_protocol_error() {
    let server = MockServer::start(MockConfig {
        malformed: true,
        ..MockConfig::default()
    })
    .unwrap();
    let s = RemoteSampler::with_api_key(spec_for(&server), None).unwrap();
    let err = s.sample_completions(&request(1)).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Transport);
    assert_eq!(server.requests(), 1);
}

#[test]
fn requests_carry_prompt_and_limits() {
    let server = MockServer::start(MockConfig::default()).unwrap();
    let s = RemoteSampler::with_api_key(
        SamplerSpec {
            n_per_request: 3,
            ..spec_for(&server)
        },
        None,
    )
    .unwrap();
    let out = s.sample_completions(&request(7)).unwrap();
    assert_eq!(out.len(), 7);
    let bodies = server.bodies();
    let ns: Vec<u64> = bodies.iter().map(|b| b["n"].as_u64().unwrap()).collect();
    assert_eq!(ns.iter().sum::<u64>(), 7);
    assert!(ns.iter().all(|&n| n <= 3));
    for b in &bodies {
        assert_eq!(b["messages"][0]["content"], "1+2=?");
        assert_eq!(b["max_tokens"], 16);
    }
}

#[test]
fn max_tokens_cut_reports_length() {
    let server = MockServer::start(MockConfig {
        completion: "1 + 2 = 3 ; A 3 E".into(),
        completion_tokens: Some(9),
        ..MockConfig::default()
    })
    .unwrap();
    let s = RemoteSampler::with_api_key(spec_for(&server), None).unwrap();
    let out = s.sample_completions(&CompletionRequest::new("1+2=?", 1, 4, 0.7, 0)).unwrap();
    assert_eq!(out[0].finish_reason, FinishReason::Length);
    assert_eq!(out[0].text, "1 + 2 =");
    assert_eq!(s.stats().completion_tokens, 4);
}

#[test]
fn cost_guard_blocks_large_jobs() {
    let server = MockServer::start(MockConfig::default()).unwrap();
    let s = RemoteSampler::with_api_key(
        SamplerSpec {
            request_ceiling: 50,
            ..spec_for(&server)
        },
        None,
    )
    .unwrap();
    let qs = generate_synthetic(&SyntheticTaskSpec::new(10, 1, 10, 3)).unwrap();
    let cfg = PipelineConfig {
        method: Method::Rft,
        n_samples: 16,
        ..PipelineConfig::default()
    };
    let err = build_rft(&qs, &s, &cfg).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Resource);
    assert_eq!(server.requests(), 0);
}

#[test]
fn upft_budget_matches_mock_usage() {
    let server = MockServer::start(MockConfig {
        completion: (0..30).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "),
        completion_tokens: Some(30),
        delay: Duration::from_millis(2),
        ..MockConfig::default()
    })
    .unwrap();
    let s = RemoteSampler::with_api_key(spec_for(&server), None).unwrap();
    let qs = generate_synthetic(&SyntheticTaskSpec::new(40, 1, 10, 4)).unwrap();
    let cfg = PipelineConfig {
        prefix_len: 5,
        structure_ratio: 0.25,
        max_sample_tokens: 64,
        workers: 4,
        ..PipelineConfig::default()
    };
    let d = build_upft(&qs, &s, &cfg).unwrap();
    // 30 prefix questions cut to 5 tokens, 10 full questions at 30
    assert_eq!(d.budget.sampling_tokens, 30 * 5 + 10 * 30);
    assert_eq!(d.budget.sampling_tokens, s.stats().completion_tokens);
    assert_eq!(d.examples.len(), 40);
}

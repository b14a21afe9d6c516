//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use upft::bounds::{random_suite, AnswerLikelihood, BOUND_TOLERANCE};
use upft::consistency::{build_trie, coverage_curve, exact_success_prob, rollout_success, RolloutSpec};
use upft::corpus::{
    generate_synthetic, is_correct, ExtractionScheme, Question, SyntheticTaskSpec, SyntheticVocab, TokenId, TraceUnit,
    Trajectory,
};
use upft::experiment::{canonical_examples, run_comparison, ExperimentConfig};
use upft::pipeline::{
    apply_template, build_rft, build_upft, structure_split, ExampleKind, Method, PipelineConfig, PREFIX_INSTRUCTION,
};
use upft::sampler::mock::{MockConfig, MockServer};
use upft::sampler::{
    CompletionRequest, FinishReason, RemoteSampler, RetryPolicy, SampleResult, Sampler, SamplerIdentity, SamplerSpec,
    ToySampler, Backend,
};
use upft::toy_model::{train, LossItem, ToyModel, TrainHyper};
use upft::{seeding, Result};

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for lik in [AnswerLikelihood::Indicator, AnswerLikelihood::smoothed()] {
        let s = lift(random_suite(0..100, lik))?;
        worst = worst.max(s.max_jensen_excess);
        failures += s.failures.iter().filter(|f| f.violation.invariant.starts_with("jensen")).count();
    }
    let elapsed = started.elapsed();
    check(
        failures == 0 && worst <= BOUND_TOLERANCE && elapsed < Duration::from_secs(60),
        format!("100 models x 2 likelihoods, max(jensen - marginal) = {worst:.3e}, {failures} violations, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let s = lift(random_suite(0..100, AnswerLikelihood::smoothed()))?;
    check(
        s.failures.is_empty() && s.n_clamp_free == 100 && s.max_identity_gap <= BOUND_TOLERANCE,
        format!(
            "{} clamp-free instances, {} (instance, t) checks, max |prefix - jensen| = {:.3e}, {} violations",
            s.n_clamp_free,
            s.n_prefix_checks,
            s.max_identity_gap,
            s.failures.len()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for b in 0..50u64 {
        let mut rng = seeding::rng(seeding::derive_index(seeding::derive(3, "grad-batch"), b));
        use rand::Rng;
        let v = rng.random_range(2..=5usize);
        let order = rng.random_range(1..=3usize);
        let mut m = lift(ToyModel::uniform(v, order, None))?;
        let tok = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(0..v as TokenId);
        let mut batch = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let prompt: Vec<TokenId> = (0..order + rng.random_range(0..2)).map(|_| tok(&mut rng)).collect();
            let target: Vec<TokenId> = (0..rng.random_range(1..=5)).map(|_| tok(&mut rng)).collect();
            let mut item = LossItem::new(prompt, target);
            for i in 1..item.loss_mask.len() {
                item.loss_mask[i] = rng.random_bool(0.8);
            }
            batch.push(item);
        }
        // random logits on every context the batch touches
        for item in &batch {
            let mut h = item.prompt.clone();
            for &t in &item.target {
                let row = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
                lift(m.set_logits(&h, row))?;
                h.push(t);
            }
        }
        let (_, grad) = lift(m.nll_and_grad(&batch))?;
        let keys: Vec<Vec<TokenId>> = m.rows().map(|(k, _)| k.clone()).collect();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        let eps = 1e-5;
        for key in keys {
            for j in 0..v {
                let base = m.logits_for_key(&key);
                let mut plus = m.clone();
                let mut minus = m.clone();
                let mut row = base.clone();
                row[j] += eps;
                lift(plus.set_logits(&key, row.clone()))?;
                row[j] -= 2.0 * eps;
                lift(minus.set_logits(&key, row))?;
                let fp = lift(plus.nll_and_grad(&batch))?.0;
                let fm = lift(minus.nll_and_grad(&batch))?.0;
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grad.get(&key, j as TokenId);
                diff += (numeric - analytic).powi(2);
                norm += analytic.powi(2).max(numeric.powi(2));
            }
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    check(worst <= 1e-5, format!("50 batches, worst relative error {worst:.3e}"))
}

/// Order-1 synthetic-vocabulary model whose rows only support digits 0-2,
/// the answer marker and the end marker.
fn sparse_answer_model(seed: u64) -> std::result::Result<ToyModel, String> {
    use rand::Rng;
    let mut rng = seeding::rng(seeding::derive(seed, "sparse-answer-model"));
    let mut m = lift(ToyModel::uniform(SyntheticVocab::SIZE, 1, Some(SyntheticVocab::END)))?;
    let support = [0, 1, 2, SyntheticVocab::ANSWER, SyntheticVocab::END];
    for ctx in 0..SyntheticVocab::SIZE as TokenId {
        let mut row = vec![-1000.0; SyntheticVocab::SIZE];
        for &s in &support {
            row[s as usize] = rng.random_range(-2.0..2.0);
        }
        lift(m.set_logits(&[ctx], row))?;
    }
    Ok(m)
}

fn criterion_4() -> Outcome {
    // coverage against hash grouping on 1,000 sampled trajectories
    let m = sparse_answer_model(4)?;
    let prompt = lift(SyntheticVocab.encode("1"))?;
    let trajs: Vec<Trajectory> = (0..1000u64)
        .map(|i| {
            let len = 1 + (i % 12) as usize;
            m.sample(&prompt, 1.0, len, seeding::derive_index(44, i))
                .map(|t| Trajectory::from_tokens("q", t, 1.0))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    let grid: Vec<usize> = (0..=14).collect();
    let curve = coverage_curve(&lift(build_trie(&trajs))?, &grid);
    let mut mismatches = 0;
    for s in &curve {
        let mut groups = std::collections::HashSet::new();
        for t in &trajs {
            let u: Vec<TraceUnit> = t.units();
            groups.insert(u[..s.t.min(u.len())].to_vec());
        }
        if groups.len() != s.n_distinct_prefixes {
            mismatches += 1;
        }
    }
    let monotone = curve.windows(2).all(|w| w[1].avg_traj_per_prefix <= w[0].avg_traj_per_prefix);

    // Monte Carlo rollouts against the exact oracle
    let n_rollouts = 200;
    let mut within = 0;
    let cells = 200u64;
    for c in 0..cells {
        let m = sparse_answer_model(1000 + c)?;
        let sampler = ToySampler::new(m.clone());
        let answer = (c % 3).to_string();
        let q = Question::new(format!("cell-{c}"), "1").with_answer(answer);
        let traj_tokens = lift(m.sample(&prompt, 1.0, 6, seeding::derive_index(45, c)))?;
        let t = (c as usize) % (traj_tokens.len() + 1);
        let traj = Trajectory::from_tokens(&q.id, traj_tokens.clone(), 1.0);
        let spec = RolloutSpec {
            n_rollouts,
            temperature: 1.0,
            max_completion_tokens: 5,
            seed: c,
            ..RolloutSpec::default()
        };
        let mc = lift(rollout_success(&sampler, &q, &traj, t, &spec))?;
        let exact = lift(exact_success_prob(&m, &q, &traj_tokens[..t], 5, ExtractionScheme::Synthetic, 1.0))?;
        let sigma = (exact * (1.0 - exact) / n_rollouts as f64).sqrt();
        if (mc.rate - exact).abs() <= 3.0 * sigma + 1e-12 {
            within += 1;
        }
    }
    let frac = within as f64 / cells as f64;
    check(
        mismatches == 0 && monotone && frac >= 0.99,
        format!(
            "coverage mismatches {mismatches} over {} t values, monotone {monotone}; rollouts within 3 sigma in {within}/{cells} cells",
            grid.len()
        ),
    )
}

/// Fixed K completions where only `correct` indices carry the right answer.
struct FixedSampler {
    k: usize,
    correct: Vec<usize>,
}

impl Sampler for FixedSampler {
    fn sample_completions(&self, req: &CompletionRequest) -> Result<Vec<SampleResult>> {
        let q = req.prompt.trim_end_matches("=?");
        let (operands, ops) = upft::corpus::parse_chain(&format!("{q}=?")).expect("synthetic prompt");
        let right = upft::corpus::evaluate_chain(&operands, &ops, 10);
        Ok((0..req.n.min(self.k))
            .map(|i| {
                let ans = if self.correct.contains(&i) { right } else { (right + 1) % 10 };
                let text = format!("step {i} ; A {ans} E");
                let tokens = SyntheticVocab.encode(&text.replace("step", "")).ok();
                let mut r = SampleResult::from_tokens(tokens.unwrap_or_default(), text, FinishReason::Stop);
                r.tokens = None;
                r.reported_tokens = Some(6);
                r
            })
            .collect())
    }

    fn identity(&self) -> SamplerIdentity {
        SamplerIdentity {
            backend: Backend::Toy,
            model: "fixed".into(),
            reproducible: true,
        }
    }
}

fn criterion_5() -> Outcome {
    // RFT emits only correct traces (exhaustive over every emitted example)
    let base = trained_model(1, 60, 2, 5)?;
    let sampler = ToySampler::new(base);
    let qs = lift(generate_synthetic(&SyntheticTaskSpec::new(200, 1, 10, 55)))?;
    let cfg = PipelineConfig {
        method: Method::Rft,
        n_samples: 16,
        max_sample_tokens: 16,
        seed: 5,
        ..PipelineConfig::default()
    };
    let rft = lift(build_rft(&qs, &sampler, &cfg))?;
    let mut wrong = 0;
    for ex in &rft.examples {
        let q = qs.iter().find(|q| q.id == ex.question_id).expect("known id");
        let t = Trajectory::from_text(&q.id, ex.target.clone(), 0, 0.7);
        if !lift(is_correct(&t, q, ExtractionScheme::Synthetic))? {
            wrong += 1;
        }
    }

    // uniform selection over a fixed correct set, 10,000 repetitions
    let correct = vec![1, 4, 7, 9, 12];
    let fixed = FixedSampler { k: 16, correct: correct.clone() };
    let mut spec = SyntheticTaskSpec::new(10_000, 1, 10, 56);
    spec.id_prefix = "sel".into();
    let many = lift(generate_synthetic(&spec))?;
    let sel = lift(build_rft(&many, &fixed, &PipelineConfig { seed: 57, ..cfg.clone() }))?;
    let mut counts = vec![0f64; correct.len()];
    for rec in &sel.manifest.questions {
        let idx = rec.selected_index.ok_or("question without selection")?;
        let pos = correct.iter().position(|&c| c == idx).ok_or("selected an incorrect sample")?;
        counts[pos] += 1.0;
    }
    let expected = many.len() as f64 / correct.len() as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((correct.len() - 1) as f64).map_err(|e| e.to_string())?.cdf(chi2);

    // structure split reproduces, prefix targets bounded by t
    let mut split_ok = true;
    let mut prefix_ok = true;
    for (t, p, seed) in [(8usize, 0.1, 1u64), (3, 0.3, 2), (1, 0.0, 3), (16, 0.5, 4)] {
        let ucfg = PipelineConfig {
            method: Method::Upft,
            prefix_len: t,
            structure_ratio: p,
            seed,
            max_sample_tokens: 16,
            ..PipelineConfig::default()
        };
        let d = lift(build_upft(&qs, &sampler, &ucfg))?;
        let ids: Vec<&str> = qs.iter().map(|q| q.id.as_str()).collect();
        let full = structure_split(&ids, p, seed);
        split_ok &= full == structure_split(&ids, p, seed);
        for ex in &d.examples {
            split_ok &= (ex.kind == ExampleKind::Full) == full.contains(&ex.question_id);
            if ex.kind == ExampleKind::Prefix {
                prefix_ok &= lift(SyntheticVocab.encode(&ex.target))?.len() <= t;
                prefix_ok &= ex.prompt == apply_template(qs.iter().find(|q| q.id == ex.question_id).unwrap());
            }
        }
    }
    check(
        wrong == 0 && !rft.examples.is_empty() && p_value > 0.01 && split_ok && prefix_ok,
        format!(
            "RFT kept {} traces, {wrong} incorrect; selection chi2 = {chi2:.3} (p = {p_value:.3}); split reproducible {split_ok}; prefixes within t {prefix_ok}",
            rft.examples.len()
        ),
    )
}

/// Canonical-trace model on `n` questions with `steps` operations.
fn trained_model(steps: usize, n: usize, epochs: usize, seed: u64) -> std::result::Result<ToyModel, String> {
    let qs = lift(generate_synthetic(&SyntheticTaskSpec::new(n, steps, 10, seed)))?;
    let h = TrainHyper {
        learning_rate: 10.0,
        warmup_ratio: 0.0,
        epochs,
        batch_size: 1,
        grad_accum_steps: 1,
        seed,
        ..TrainHyper::default()
    };
    let m = lift(ToyModel::uniform(SyntheticVocab::SIZE, 6, Some(SyntheticVocab::END)))?;
    Ok(lift(train(&m, &lift(canonical_examples(&qs, seed))?, &h))?.model)
}

fn criterion_6() -> Outcome {
    // configured scale: K = 16, 400-token traces, t = 8, via the mock endpoint
    let words: Vec<String> = (0..399).map(|i| format!("w{i}")).chain(["A 7 E".to_string()]).collect();
    let server = lift(MockServer::start(MockConfig {
        completion: words.join(" "),
        completion_tokens: Some(400),
        ..MockConfig::default()
    }))?;
    let spec = SamplerSpec {
        backend: Backend::Remote,
        endpoint: Some(server.url().to_string()),
        n_per_request: 4,
        max_in_flight: 8,
        ..SamplerSpec::default()
    };
    let remote = lift(RemoteSampler::with_api_key(spec, None))?;
    let qs = lift(generate_synthetic(&SyntheticTaskSpec::new(20, 1, 10, 61)))?;
    let upft_cfg = PipelineConfig {
        method: Method::Upft,
        prefix_len: 8,
        structure_ratio: 0.1,
        max_sample_tokens: 512,
        seed: 6,
        ..PipelineConfig::default()
    };
    let upft = lift(build_upft(&qs, &remote, &upft_cfg))?;
    let rft = lift(build_rft(&qs, &remote, &PipelineConfig { method: Method::Rft, n_samples: 16, ..upft_cfg.clone() }))?;
    let long_ratio = upft.budget.sampling_tokens as f64 / rft.budget.sampling_tokens as f64;
    let exact = (18 * 8 + 2 * 400) as u64 == upft.budget.sampling_tokens && rft.budget.sampling_tokens == 20 * 16 * 400;

    // synthetic task with 4-step chains; the table model only reproduces
    // full traces on contexts it was trained on, so sample those questions
    let model = trained_model(4, 100, 16, 63)?;
    let sampler = ToySampler::new(model);
    let sq = lift(generate_synthetic(&SyntheticTaskSpec::new(100, 4, 10, 63)))?;
    let su = lift(build_upft(&sq, &sampler, &PipelineConfig { max_sample_tokens: 40, ..upft_cfg.clone() }))?;
    let sr = lift(build_rft(&sq, &sampler, &PipelineConfig { method: Method::Rft, n_samples: 16, max_sample_tokens: 40, ..upft_cfg }))?;
    let mean_len = sr.budget.sampling_tokens as f64 / (16.0 * sq.len() as f64);
    let synth_ratio = su.budget.sampling_tokens as f64 / sr.budget.sampling_tokens as f64;
    check(
        long_ratio <= 0.01 && exact && mean_len >= 20.0 && synth_ratio <= 0.05,
        format!(
            "400-token traces: UPFT/RFT = {}/{} = {long_ratio:.5} (exact arithmetic {exact}); synthetic mean length {mean_len:.2}: ratio {synth_ratio:.4}",
            upft.budget.sampling_tokens, rft.budget.sampling_tokens
        ),
    )
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig {
        workers: 5,
        ..ExperimentConfig::default()
    };
    let r = lift(run_comparison(&cfg))?;
    let elapsed = started.elapsed();
    let in_band = r.base.len() == 5 && r.base.iter().all(|b| (0.3..=0.7).contains(&b.probe_accuracy));
    let med = |m: Method| r.summary.iter().find(|s| s.method == m).and_then(|s| s.median_accuracy);
    let table_complete = r.rows.len() == 20 && r.rows.iter().all(|row| row.accuracy.is_some());
    check(
        r.checks.rft_ge_sft == Some(true)
            && r.checks.upft_non_degradation == Some(true)
            && in_band
            && table_complete
            && elapsed < Duration::from_secs(600),
        format!(
            "500/200 split, 5 seeds in {elapsed:.2?}; base median {:.3}, SFT {:?}, RFT {:?}, UPFT {:?}, UPFT-LF {:?}; UPFT-SFT {:?} (reported only)",
            r.base_median_accuracy,
            med(Method::Sft),
            med(Method::Rft),
            med(Method::Upft),
            med(Method::UpftLabelFiltered),
            r.checks.upft_minus_sft_median
        ),
    )
}

fn criterion_8() -> Outcome {
    let expected = "Please provide the initial step towards resolving the question. This step may serve as a foundation but might not encompass the entire solution.";
    let q = Question::new("q", "2+3=?");
    let got = apply_template(&q);
    check(
        PREFIX_INSTRUCTION == expected && got == format!("2+3=? {expected}"),
        format!("template bytes: {} chars", got.len()),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("compare.toml");
    std::fs::write(&config, "[experiment]\nn_seeds = 2\nworkers = 2\n").map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_upft"))
            .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "compare"])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("compare failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let json = std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?;
        let csv = std::fs::read(out.join("report.csv")).map_err(|e| e.to_string())?;
        outputs.push((json, csv));
    }
    check(
        outputs[0] == outputs[1],
        format!("report.json {} bytes, report.csv {} bytes across two runs", outputs[0].0.len(), outputs[0].1.len()),
    )
}

fn criterion_10() -> Outcome {
    // in-flight cap
    let server = lift(MockServer::start(MockConfig {
        delay: Duration::from_millis(40),
        ..MockConfig::default()
    }))?;
    let spec = SamplerSpec {
        backend: Backend::Remote,
        endpoint: Some(server.url().to_string()),
        max_in_flight: 3,
        n_per_request: 1,
        ..SamplerSpec::default()
    };
    let s = lift(RemoteSampler::with_api_key(spec.clone(), None))?;
    lift(s.sample_completions(&CompletionRequest::new("1+1=?", 12, 16, 0.7, 0)))?;
    let peak = server.max_in_flight();
    let cap_ok = peak <= 3 && server.requests() == 12;

    // retries with non-decreasing backoff
    let flaky = lift(MockServer::start(MockConfig {
        fail_first: 3,
        fail_status: 429,
        ..MockConfig::default()
    }))?;
    let retry_spec = SamplerSpec {
        endpoint: Some(flaky.url().to_string()),
        max_in_flight: 1,
        retry: RetryPolicy {
            max_attempts: 5,
            backoff_base_ms: 20,
            backoff_max_ms: 1000,
        },
        ..spec.clone()
    };
    let rs = lift(RemoteSampler::with_api_key(retry_spec, None))?;
    lift(rs.sample_completions(&CompletionRequest::new("1+1=?", 1, 16, 0.7, 0)))?;
    let stats = rs.stats();
    let arrivals = flaky.arrivals();
    let gaps_ok = arrivals
        .windows(2)
        .zip(&stats.backoffs_ms)
        .all(|(w, &b)| w[1].duration_since(w[0]) >= Duration::from_millis(b));
    let backoff_ok = stats.retries == 3
        && stats.backoffs_ms.windows(2).all(|w| w[0] <= w[1])
        && gaps_ok;

    // usage counts flow verbatim into budgets
    let counting = lift(MockServer::start(MockConfig {
        completion_tokens: Some(37),
        ..MockConfig::default()
    }))?;
    let cs = lift(RemoteSampler::with_api_key(
        SamplerSpec {
            endpoint: Some(counting.url().to_string()),
            n_per_request: 4,
            ..spec
        },
        None,
    ))?;
    let qs = lift(generate_synthetic(&SyntheticTaskSpec::new(10, 1, 10, 101)))?;
    let d = lift(build_rft(
        &qs,
        &cs,
        &PipelineConfig {
            method: Method::Rft,
            n_samples: 16,
            ..PipelineConfig::default()
        },
    ))?;
    let usage_ok = d.budget.sampling_tokens == cs.stats().completion_tokens
        && d.budget.sampling_tokens == 10 * 16 * 37
        && !d.budget.approximate;
    check(
        cap_ok && backoff_ok && usage_ok,
        format!(
            "peak in-flight {peak} (cap 3); backoffs {:?} ms over {} retries; budget {} tokens = mock usage {}",
            stats.backoffs_ms,
            stats.retries,
            d.budget.sampling_tokens,
            cs.stats().completion_tokens
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("bound chain: jensen <= marginal", criterion_1),
        ("prefix bound equals jensen bound", criterion_2),
        ("analytic gradient vs finite differences", criterion_3),
        ("coverage oracle and rollout consistency", criterion_4),
        ("pipeline correctness", criterion_5),
        ("sampling budget ratios", criterion_6),
        ("desk-scale method comparison", criterion_7),
        ("template fidelity", criterion_8),
        ("compare determinism", criterion_9),
        ("remote integration against mock server", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {:>2}: PASS  {name} [{:.2?}] {detail}", i + 1, started.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2}: FAIL  {name} [{:.2?}] {detail}", i + 1, started.elapsed());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

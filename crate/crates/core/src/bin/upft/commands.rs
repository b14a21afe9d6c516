use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use upft::bounds::{
    random_suite, verify_bounds, AnswerLikelihood, AnswerReader, BoundProblem, BoundReport, EnumOptions,
    FinalTokenReader, SchemeReader, Truncation, BOUND_TOLERANCE,
};
use upft::consistency::{build_trie, coverage_csv, coverage_curve, rollout_csv, rollout_curve, CoverageStat};
use upft::corpus::{generate_synthetic, read_corpus, write_corpus, ExtractionScheme, SyntheticTaskSpec, SyntheticVocab, Trajectory};
use upft::experiment::{evaluate_accuracy, run_comparison};
use upft::pipeline::{budget_report, build_dataset, DatasetManifest, Method};
use upft::sampler::{count_tokens, Backend, CompletionRequest, RemoteSampler, Sampler, ToySampler};
use upft::toy_model::{load_checkpoint, save_checkpoint, train, ToyModel};
use upft::{jsonl, seeding, Error, Result};

use crate::config::FileConfig;
use crate::{BoundsArgs, BudgetArgs, Cli, Command, CompareArgs, CoverageArgs, DatasetArgs, EvalArgs, RolloutArgs, SampleArgs, SamplerArgs, SynthArgs, TrainArgs};

struct Run<'a> {
    out: &'a Path,
    subcommand: &'static str,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        jsonl::write_json(&self.path(name), value)
    }

    /// Resolved configuration, seeds and versions for reproducing the run.
    fn provenance(&self, resolved: Value) -> Result<()> {
        let doc = json!({
            "tool": "upft",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": self.subcommand,
            "argv": std::env::args().collect::<Vec<_>>(),
            "resolved": resolved,
        });
        self.write_json("provenance.json", &doc)
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let run = |subcommand| Run { out: &cli.out, subcommand };
    match &cli.command {
        Command::Synth(a) => synth(&run("synth"), cfg, a),
        Command::Sample(a) => sample(&run("sample"), cfg, a),
        Command::AnalyzeCoverage(a) => analyze_coverage(&run("analyze-coverage"), cfg, a),
        Command::AnalyzeRollout(a) => analyze_rollout(&run("analyze-rollout"), cfg, a),
        Command::VerifyBounds(a) => verify(&run("verify-bounds"), cfg, a),
        Command::BuildDataset(a) => dataset(&run("build-dataset"), cfg, a),
        Command::TrainToy(a) => train_toy(&run("train-toy"), cfg, a),
        Command::Evaluate(a) => evaluate(&run("evaluate"), cfg, a),
        Command::Compare(a) => compare(&run("compare"), cfg, a),
        Command::Budget(a) => budget(&run("budget"), a),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn synth(run: &Run, mut cfg: FileConfig, a: &SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    s.n_questions = a.n.unwrap_or(s.n_questions);
    s.n_steps = a.steps.unwrap_or(s.n_steps);
    s.modulus = a.modulus.unwrap_or(s.modulus);
    s.seed = a.seed.unwrap_or(s.seed);
    if let Some(p) = &a.id_prefix {
        s.id_prefix = p.clone();
    }
    let mut spec = SyntheticTaskSpec::new(s.n_questions, s.n_steps, s.modulus, s.seed);
    spec.id_prefix = s.id_prefix.clone();
    let questions = generate_synthetic(&spec)?;
    write_corpus(&run.path("corpus.jsonl"), &questions)?;
    run.provenance(json!({ "synth": to_value(&spec) }))?;
    println!("wrote {} questions to {}", questions.len(), run.path("corpus.jsonl").display());
    Ok(())
}

fn resolve_sampler(cfg: &mut FileConfig, a: &SamplerArgs) -> Result<()> {
    let s = &mut cfg.sampler;
    if let Some(b) = &a.backend {
        s.backend = b.parse()?;
    }
    if let Some(e) = &a.endpoint {
        s.endpoint = Some(e.clone());
    }
    if let Some(m) = &a.model_name {
        s.model = m.clone();
    }
    if let Some(n) = a.max_in_flight {
        s.max_in_flight = n;
    }
    s.allow_over_ceiling |= a.allow_over_ceiling;
    s.validate()
}

fn make_sampler(cfg: &FileConfig, a: &SamplerArgs) -> Result<Box<dyn Sampler>> {
    match cfg.sampler.backend {
        Backend::Toy => {
            let (model, label) = match &a.model_path {
                Some(p) => (load_checkpoint(p)?, p.display().to_string()),
                None => {
                    log::warn!("no --model-path given; sampling from an untrained order-{} model", a.order);
                    (ToyModel::uniform(SyntheticVocab::SIZE, a.order, Some(SyntheticVocab::END))?, "untrained".to_string())
                }
            };
            Ok(Box::new(ToySampler::new(model).with_label(label)))
        }
        Backend::Remote => Ok(Box::new(RemoteSampler::from_env(cfg.sampler.clone())?)),
    }
}

fn sample(run: &Run, mut cfg: FileConfig, a: &SampleArgs) -> Result<()> {
    resolve_sampler(&mut cfg, &a.sampler)?;
    let sc = &mut cfg.sample;
    sc.n_per_question = a.n.unwrap_or(sc.n_per_question);
    sc.seed = a.seed.unwrap_or(sc.seed);
    sc.template |= a.template;
    if let Some(t) = a.temperature {
        cfg.sampler.temperature = t;
    }
    if let Some(m) = a.max_tokens {
        cfg.sampler.max_tokens = m;
    }
    cfg.sampler.validate()?;
    let questions = read_corpus(&a.corpus)?;
    let sampler = make_sampler(&cfg, &a.sampler)?;
    sampler.preflight(questions.len() as u64 * sampler.requests_for(cfg.sample.n_per_question))?;
    let mut trajs = Vec::new();
    for q in &questions {
        let prompt = if cfg.sample.template {
            upft::pipeline::apply_template(q)
        } else {
            q.prompt_text.clone()
        };
        let req = CompletionRequest::new(
            prompt,
            cfg.sample.n_per_question,
            cfg.sampler.max_tokens,
            cfg.sampler.temperature,
            seeding::derive(cfg.sample.seed, &q.id),
        );
        for r in sampler.sample_completions(&req)? {
            let mut t = match r.tokens.clone() {
                Some(tokens) => Trajectory::from_tokens(&q.id, tokens, cfg.sampler.temperature),
                None => Trajectory::from_text(&q.id, r.text.clone(), count_tokens(&r).count, cfg.sampler.temperature),
            };
            t.annotate(q, cfg.pipeline.scheme);
            trajs.push(t);
        }
    }
    jsonl::write(&run.path("trajectories.jsonl"), &trajs)?;
    run.provenance(json!({
        "sampler": to_value(&cfg.sampler),
        "sampler_identity": to_value(&sampler.identity()),
        "sample": to_value(&cfg.sample),
        "corpus": a.corpus,
    }))?;
    let correct = trajs.iter().filter(|t| t.correct == Some(true)).count();
    println!("sampled {} trajectories ({} correct)", trajs.len(), correct);
    Ok(())
}

fn group_by_question(trajs: Vec<Trajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut by_q: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajs {
        by_q.entry(t.question_id.clone()).or_default().push(t);
    }
    by_q
}

fn analyze_coverage(run: &Run, mut cfg: FileConfig, a: &CoverageArgs) -> Result<()> {
    if let Some(g) = &a.t_grid {
        cfg.coverage.t_grid = g.clone();
    }
    let trajs: Vec<Trajectory> = jsonl::read(&a.trajectories)?;
    let by_q = group_by_question(trajs);
    if by_q.is_empty() {
        return Err(Error::validation("no trajectories to analyze"));
    }
    let mut curves: BTreeMap<String, Vec<CoverageStat>> = BTreeMap::new();
    let mut csv = String::from("question_id,");
    for (i, (qid, ts)) in by_q.iter().enumerate() {
        let curve = coverage_curve(&build_trie(ts)?, &cfg.coverage.t_grid);
        let body = coverage_csv(&curve)?;
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            csv.push_str(header);
            csv.push('\n');
        }
        for line in lines {
            csv.push_str(&format!("{qid},{line}\n"));
        }
        println!("{qid}: {} trajectories", ts.len());
        for s in &curve {
            println!("  t={:<4} prefixes={:<6} avg={:.3}", s.t, s.n_distinct_prefixes, s.avg_traj_per_prefix);
        }
        curves.insert(qid.clone(), curve);
    }
    run.write_text("coverage.csv", &csv)?;
    run.write_json("coverage.json", &curves)?;
    run.provenance(json!({ "coverage": to_value(&cfg.coverage), "trajectories": a.trajectories }))
}

fn analyze_rollout(run: &Run, mut cfg: FileConfig, a: &RolloutArgs) -> Result<()> {
    resolve_sampler(&mut cfg, &a.sampler)?;
    let r = &mut cfg.rollout;
    r.n_rollouts = a.n_rollouts.unwrap_or(r.n_rollouts);
    r.temperature = a.temperature.unwrap_or(r.temperature);
    r.max_completion_tokens = a.max_completion_tokens.unwrap_or(r.max_completion_tokens);
    r.seed = a.seed.unwrap_or(r.seed);
    r.workers = a.workers.unwrap_or(r.workers);
    let t_grid = a.t_grid.clone().unwrap_or_else(|| vec![0, 1, 2, 4, 8]);
    let questions = read_corpus(&a.corpus)?;
    let by_q = group_by_question(jsonl::read(&a.trajectories)?);
    let pick = |qid: &str| -> Option<(Trajectory, Trajectory)> {
        let q = questions.iter().find(|q| q.id == qid)?;
        let annotated: Vec<Trajectory> = by_q
            .get(qid)?
            .iter()
            .cloned()
            .map(|mut t| {
                t.annotate(q, cfg.rollout.scheme);
                t
            })
            .collect();
        let good = annotated.iter().find(|t| t.correct == Some(true))?.clone();
        let bad = annotated.iter().find(|t| t.correct == Some(false))?.clone();
        Some((good, bad))
    };
    let (qid, (good, bad)) = match &a.question_id {
        Some(id) => (id.clone(), pick(id).ok_or_else(|| {
            Error::validation(format!("question {id} needs both a correct and an incorrect trajectory"))
        })?),
        None => by_q
            .keys()
            .find_map(|id| pick(id).map(|p| (id.clone(), p)))
            .ok_or_else(|| Error::validation("no question has both a correct and an incorrect trajectory"))?,
    };
    let q = questions.iter().find(|q| q.id == qid).expect("picked from corpus");
    let max_t = good.token_count.min(bad.token_count);
    let grid: Vec<usize> = t_grid.into_iter().filter(|&t| t <= max_t).collect();
    let sampler = make_sampler(&cfg, &a.sampler)?;
    let stats = rollout_curve(sampler.as_ref(), q, &good, &bad, &grid, &cfg.rollout)?;
    run.write_text("rollout.csv", &rollout_csv(&stats)?)?;
    run.write_json("rollout.json", &json!({ "question_id": qid, "stats": stats }))?;
    run.provenance(json!({
        "rollout": to_value(&cfg.rollout),
        "sampler": to_value(&cfg.sampler),
        "sampler_identity": to_value(&sampler.identity()),
        "question_id": qid,
        "t_grid": grid,
    }))?;
    for s in &stats {
        println!(
            "t={:<4} correct={:.3}±{:.3} incorrect={:.3}±{:.3}",
            s.t, s.success_rate_correct, s.stderr_correct, s.success_rate_incorrect, s.stderr_incorrect
        );
    }
    Ok(())
}

fn verify(run: &Run, mut cfg: FileConfig, a: &BoundsArgs) -> Result<()> {
    if let Some(path) = &a.check_report {
        let stored: BoundReport = jsonl::read_json(path)?;
        let found = stored.check();
        run.write_json("check.json", &json!({ "report": path, "violations": found }))?;
        run.provenance(json!({ "check_report": path }))?;
        if found.is_empty() && stored.violations.is_empty() {
            println!("report is consistent: no violations");
            return Ok(());
        }
        for v in found.iter().chain(&stored.violations) {
            println!("VIOLATION {v}");
        }
        return Err(Error::Verification(format!("{} violation(s) in {}", found.len().max(stored.violations.len()), path.display())));
    }

    let b = &mut cfg.bounds;
    if let Some(l) = &a.likelihood {
        b.likelihood = match l.as_str() {
            "indicator" => AnswerLikelihood::Indicator,
            "smoothed" => AnswerLikelihood::smoothed(),
            other => return Err(Error::validation(format!("unknown likelihood {other:?}"))),
        };
    }
    if let (Some(eps), AnswerLikelihood::Smoothed { epsilon }) = (a.epsilon, &mut b.likelihood) {
        *epsilon = eps;
    }
    if let AnswerLikelihood::Smoothed { epsilon } = b.likelihood {
        if !(0.0..0.5).contains(&epsilon) {
            return Err(Error::validation("smoothing epsilon must be in [0, 0.5)"));
        }
    }

    if let Some(n) = a.random_suite {
        let started = Instant::now();
        let summary = random_suite(a.suite_seed..a.suite_seed + n, b.likelihood)?;
        run.write_json("suite.json", &summary)?;
        run.provenance(json!({ "random_suite": n, "suite_seed": a.suite_seed, "likelihood": to_value(&b.likelihood) }))?;
        println!(
            "{} instances ({} clamp-free, {} prefix checks): max jensen - marginal = {:.3e}, max |prefix - jensen| = {:.3e}, tolerance {:e}",
            summary.n_instances,
            summary.n_clamp_free,
            summary.n_prefix_checks,
            summary.max_jensen_excess,
            summary.max_identity_gap,
            BOUND_TOLERANCE
        );
        println!("elapsed {:.2?}", started.elapsed());
        if !summary.failures.is_empty() {
            for f in &summary.failures {
                println!("VIOLATION seed {}: {}", f.seed, f.violation);
            }
            return Err(Error::Verification(format!("{} violation(s) in random suite", summary.failures.len())));
        }
        return Ok(());
    }

    let path = a
        .model_path
        .as_ref()
        .ok_or_else(|| Error::validation("verify-bounds needs --model-path, --check-report or --random-suite"))?;
    let model = load_checkpoint(path)?;
    b.max_len = a.max_len.unwrap_or(b.max_len);
    if let Some(g) = &a.t_grid {
        b.t_grid = Some(g.clone());
    }
    if let Some(r) = &a.reader {
        b.reader = r.clone();
    }
    if a.drop_unterminated {
        b.truncation = Truncation::DropUnterminated;
    }
    let answer = a.answer.clone().ok_or_else(|| Error::validation("--answer is required"))?;
    let prompt = match &a.prompt_ids {
        Some(ids) => ids.clone(),
        None => SyntheticVocab.encode(&a.prompt)?,
    };
    let reader: Box<dyn AnswerReader> = match b.reader.as_str() {
        "final-token" => Box::new(FinalTokenReader { end_token: model.end_token() }),
        scheme => Box::new(SchemeReader(scheme.parse::<ExtractionScheme>()?)),
    };
    let grid = b.t_grid.clone().unwrap_or_else(|| (0..=b.max_len).collect());
    let problem = BoundProblem {
        model: &model,
        prompt: prompt.clone(),
        answer,
        max_len: b.max_len,
        reader: reader.as_ref(),
        likelihood: b.likelihood,
        options: EnumOptions {
            temperature: b.temperature,
            truncation: b.truncation,
            ..EnumOptions::default()
        },
    };
    let report = verify_bounds(&problem, &grid)?;
    run.write_json("bounds.json", &report)?;
    run.provenance(json!({ "bounds": to_value(&cfg.bounds), "model": path, "prompt": prompt }))?;
    println!("log p(y|x)      = {:.12}", report.log_p_y_given_x);
    println!("jensen bound    = {:.12}", report.jensen_bound);
    for (t, n, v) in report.table() {
        println!("prefix bound t={t:<3} ({n} prefixes) = {v:.12}");
    }
    println!(
        "traces {} mass {:.6} clamp events {}",
        report.enumeration_limits.n_traces, report.enumeration_limits.total_mass, report.clamp_events
    );
    for n in &report.notes {
        println!("note: {n}");
    }
    report.ensure_ok()
}

fn dataset(run: &Run, mut cfg: FileConfig, a: &DatasetArgs) -> Result<()> {
    resolve_sampler(&mut cfg, &a.sampler)?;
    let p = &mut cfg.pipeline;
    if let Some(m) = &a.method {
        p.method = m.parse()?;
    }
    p.prefix_len = a.t.unwrap_or(p.prefix_len);
    p.structure_ratio = a.p.unwrap_or(p.structure_ratio);
    p.n_samples = a.k.unwrap_or(p.n_samples);
    p.temperature = a.temperature.unwrap_or(p.temperature);
    p.max_sample_tokens = a.max_sample_tokens.unwrap_or(p.max_sample_tokens);
    p.seed = a.seed.unwrap_or(p.seed);
    p.workers = a.workers.unwrap_or(p.workers);
    if let Some(s) = &a.scheme {
        p.scheme = s.parse()?;
    }
    let questions = read_corpus(&a.corpus)?;
    let sampler = make_sampler(&cfg, &a.sampler)?;
    let data = build_dataset(&questions, sampler.as_ref(), &cfg.pipeline)?;
    jsonl::write(&run.path("dataset.jsonl"), &data.examples)?;
    run.write_json("manifest.json", &data.manifest)?;
    run.provenance(json!({
        "pipeline": to_value(&cfg.pipeline),
        "sampler": to_value(&cfg.sampler),
        "sampler_identity": to_value(&sampler.identity()),
        "corpus": a.corpus,
    }))?;
    let full = data.examples.iter().filter(|e| e.kind == upft::pipeline::ExampleKind::Full).count();
    println!(
        "{}: {} examples ({} full, {} prefix), {} dropped, sampling tokens {}, tuning tokens {}",
        cfg.pipeline.method,
        data.examples.len(),
        full,
        data.examples.len() - full,
        data.manifest.dropped.len(),
        data.budget.sampling_tokens,
        data.budget.tuning_tokens
    );
    if data.manifest.partial {
        return Err(Error::Transport {
            message: format!("{} question(s) failed; partial dataset written", data.manifest.failed.len()),
            attempts: 0,
            attempt_log: data.manifest.failed.iter().map(|f| format!("{}: {}", f.id, f.error)).collect(),
        });
    }
    Ok(())
}

fn train_toy(run: &Run, mut cfg: FileConfig, a: &TrainArgs) -> Result<()> {
    let h = &mut cfg.train;
    h.learning_rate = a.lr.unwrap_or(h.learning_rate);
    h.epochs = a.epochs.unwrap_or(h.epochs);
    h.batch_size = a.batch_size.unwrap_or(h.batch_size);
    h.grad_accum_steps = a.grad_accum.unwrap_or(h.grad_accum_steps);
    h.warmup_ratio = a.warmup_ratio.unwrap_or(h.warmup_ratio);
    h.max_length = a.max_length.unwrap_or(h.max_length);
    h.seed = a.seed.unwrap_or(h.seed);
    let examples = jsonl::read(&a.dataset)?;
    let init = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => ToyModel::uniform(SyntheticVocab::SIZE, a.order, Some(SyntheticVocab::END))?,
    };
    let report = train(&init, &examples, &cfg.train)?;
    save_checkpoint(&report.model, &run.path("model.json"))?;
    let mut log = String::from("step,loss\n");
    for (i, l) in report.step_losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    run.write_text("train_log.csv", &log)?;
    run.provenance(json!({
        "train": to_value(&cfg.train),
        "dataset": a.dataset,
        "init": a.init,
        "order": a.order,
        "skipped_examples": report.skipped_examples,
    }))?;
    println!(
        "trained on {} examples for {} steps; final loss {}",
        examples.len(),
        report.step_losses.len(),
        report.step_losses.last().map_or("-".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn evaluate(run: &Run, mut cfg: FileConfig, a: &EvalArgs) -> Result<()> {
    cfg.eval.max_len = a.max_len.unwrap_or(cfg.eval.max_len);
    let scheme: ExtractionScheme = match &a.scheme {
        Some(s) => s.parse()?,
        None => cfg.pipeline.scheme,
    };
    let model = load_checkpoint(&a.model_path)?;
    let questions = read_corpus(&a.corpus)?;
    let acc = evaluate_accuracy(&model, &questions, scheme, cfg.eval.max_len)?;
    let stderr = upft::consistency::binomial_stderr(acc, questions.len());
    run.write_json(
        "evaluation.json",
        &json!({ "accuracy": acc, "stderr": stderr, "n_questions": questions.len() }),
    )?;
    run.provenance(json!({ "eval": to_value(&cfg.eval), "scheme": scheme, "model": a.model_path, "corpus": a.corpus }))?;
    println!("accuracy {:.4} ± {:.4} on {} questions", acc, stderr, questions.len());
    Ok(())
}

fn compare(run: &Run, mut cfg: FileConfig, a: &CompareArgs) -> Result<()> {
    let e = &mut cfg.experiment;
    e.n_seeds = a.n_seeds.unwrap_or(e.n_seeds);
    e.seed = a.seed.unwrap_or(e.seed);
    e.workers = a.workers.unwrap_or(e.workers);
    if let Some(ms) = &a.methods {
        e.methods = ms.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
    }
    let started = Instant::now();
    let report = run_comparison(&cfg.experiment)?;
    run.write_json("report.json", &report)?;
    run.write_text("report.csv", &report.to_csv()?)?;
    run.provenance(json!({ "experiment": to_value(&cfg.experiment) }))?;
    print!("{}", report.render());
    println!("wall time {:.2?}", started.elapsed());
    Ok(())
}

fn budget(run: &Run, a: &BudgetArgs) -> Result<()> {
    let manifests: Vec<DatasetManifest> = a.manifests.iter().map(|p| jsonl::read_json(p)).collect::<Result<_>>()?;
    let budgets: Vec<_> = manifests.iter().map(|m| (m.method, m.budget)).collect();
    let table = budget_report(&budgets)?;
    run.write_json("budget.json", &table)?;
    run.write_text("budget.csv", &table.to_csv()?)?;
    run.provenance(json!({ "manifests": a.manifests }))?;
    print!("{}", table.render());
    Ok(())
}

//! Desk-scale method comparison on the synthetic task: a partially trained
//! base model self-samples each method's dataset, a fresh copy is tuned on
//! it, and greedy accuracy is measured on a shared test split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::consistency::binomial_stderr;
use crate::corpus::{
    generate_synthetic, is_correct, reference_trace, ExtractionScheme, Question, SyntheticTaskSpec, SyntheticVocab,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::pipeline::{
    apply_template, build_dataset, budget_report, parallel_map, ExampleKind, Method, PipelineConfig, TokenBudget,
    TrainingExample,
};
use crate::sampler::ToySampler;
use crate::seeding;
use crate::toy_model::{train, ToyModel, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_steps: usize,
    pub modulus: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 500,
            n_test: 200,
            n_steps: 1,
            modulus: 10,
            seed: 2025,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseModelConfig {
    /// Context length of the tabular model.
    pub order: usize,
    /// Canonical traces the base model is pretrained on.
    pub n_seed_questions: usize,
    pub n_probe: usize,
    /// Pretraining epochs tried before giving up on the band.
    pub max_epochs: usize,
    /// Epochs run before the band is first checked.
    pub min_epochs: usize,
    pub band_low: f64,
    pub band_high: f64,
    /// Per-epoch optimizer settings; `epochs` is ignored.
    pub hyper: TrainHyper,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        BaseModelConfig {
            order: 6,
            n_seed_questions: 120,
            n_probe: 200,
            max_epochs: 12,
            min_epochs: 4,
            band_low: 0.3,
            band_high: 0.7,
            hyper: TrainHyper {
                learning_rate: 10.0,
                warmup_ratio: 0.0,
                epochs: 1,
                batch_size: 1,
                grad_accum_steps: 1,
                ..TrainHyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub base: BaseModelConfig,
    /// Shared pipeline settings; `method` and `seed` are set per run.
    pub pipeline: PipelineConfig,
    pub train: TrainHyper,
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    pub seed: u64,
    pub eval_max_len: usize,
    pub scheme: ExtractionScheme,
    /// Seeds processed concurrently.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            base: BaseModelConfig::default(),
            pipeline: PipelineConfig {
                max_sample_tokens: 16,
                ..PipelineConfig::default()
            },
            train: TrainHyper {
                learning_rate: 2.0,
                warmup_ratio: 0.03,
                epochs: 2,
                batch_size: 1,
                grad_accum_steps: 1,
                ..TrainHyper::default()
            },
            methods: Method::ALL.to_vec(),
            n_seeds: 5,
            seed: 0,
            eval_max_len: 16,
            scheme: ExtractionScheme::Synthetic,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::validation(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::validation("n_seeds must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("at least one method is required"));
        }
        if self.corpus.n_train == 0 || self.corpus.n_test == 0 {
            return Err(Error::validation("train and test splits must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.base.band_low) || self.base.band_low > self.base.band_high || self.base.band_high > 1.0 {
            return Err(Error::validation("base accuracy band must satisfy 0 <= low <= high <= 1"));
        }
        if self.base.order == 0 || self.eval_max_len == 0 {
            return Err(Error::validation("order and eval_max_len must be positive"));
        }
        self.train.validate()?;
        self.base.hyper.validate()?;
        PipelineConfig {
            method: Method::Upft,
            ..self.pipeline.clone()
        }
        .validate()?;
        SyntheticTaskSpec::new(self.corpus.n_train, self.corpus.n_steps, self.corpus.modulus, self.corpus.seed).validate()
    }

    /// Train and test corpora; ids are disjoint by prefix.
    pub fn corpora(&self) -> Result<(Vec<Question>, Vec<Question>)> {
        let c = &self.corpus;
        let split = |n, label: &str, prefix: &str| {
            let mut spec = SyntheticTaskSpec::new(n, c.n_steps, c.modulus, seeding::derive(c.seed, label));
            spec.id_prefix = prefix.to_string();
            generate_synthetic(&spec)
        };
        Ok((split(c.n_train, "train", "train-")?, split(c.n_test, "test", "test-")?))
    }
}

/// Greedy accuracy with plain prompts.
pub fn evaluate_accuracy(m: &ToyModel, questions: &[Question], scheme: ExtractionScheme, max_len: usize) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::validation("cannot evaluate on zero questions"));
    }
    Ok(count_correct(m, questions, scheme, max_len)? as f64 / questions.len() as f64)
}

fn count_correct(m: &ToyModel, questions: &[Question], scheme: ExtractionScheme, max_len: usize) -> Result<usize> {
    let mut n = 0;
    for q in questions {
        let prompt = SyntheticVocab.encode(&q.prompt_text)?;
        let out = m.greedy_decode(&prompt, max_len)?;
        if is_correct(&Trajectory::from_tokens(&q.id, out, 0.0), q, scheme)? {
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub model: ToyModel,
    pub epochs: usize,
    pub probe_accuracy: f64,
}

/// Canonical traces for `questions`, under both the plain and the
/// templated prompt.
pub fn canonical_examples(questions: &[Question], seed: u64) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::with_capacity(2 * questions.len());
    for q in questions {
        let target = reference_trace(q).ok_or_else(|| Error::Data {
            item: q.id.clone(),
            message: "not a synthetic chain question".into(),
        })?;
        for prompt in [q.prompt_text.clone(), apply_template(q)] {
            out.push(TrainingExample {
                question_id: q.id.clone(),
                prompt,
                target: target.clone(),
                kind: ExampleKind::Full,
                method: Method::Sft,
                t: 0,
                seed,
            });
        }
    }
    Ok(out)
}

/// Trains from uniform on canonical traces of a seed corpus, one epoch at a
/// time, until probe accuracy lands in the configured band.
pub fn make_base_model(cfg: &ExperimentConfig, seed: u64) -> Result<BaseModel> {
    let b = &cfg.base;
    let c = &cfg.corpus;
    let mut seed_spec = SyntheticTaskSpec::new(b.n_seed_questions, c.n_steps, c.modulus, seeding::derive(seed, "seed-corpus"));
    seed_spec.id_prefix = "seed-".into();
    let mut probe_spec = SyntheticTaskSpec::new(b.n_probe, c.n_steps, c.modulus, seeding::derive(seed, "probe"));
    probe_spec.id_prefix = "probe-".into();
    let probe = generate_synthetic(&probe_spec)?;
    let mut model = ToyModel::uniform(SyntheticVocab::SIZE, b.order, Some(SyntheticVocab::END))?;
    if b.n_seed_questions == 0 || b.max_epochs == 0 {
        let acc = evaluate_accuracy(&model, &probe, cfg.scheme, cfg.eval_max_len)?;
        return in_band(b, model, 0, acc);
    }
    let examples = canonical_examples(&generate_synthetic(&seed_spec)?, seed)?;
    let mut acc = 0.0;
    for epoch in 1..=b.max_epochs {
        let h = TrainHyper {
            epochs: 1,
            seed: seeding::derive_index(seeding::derive(seed, "base-train"), epoch as u64),
            ..b.hyper.clone()
        };
        model = train(&model, &examples, &h)?.model;
        if epoch < b.min_epochs {
            continue;
        }
        acc = evaluate_accuracy(&model, &probe, cfg.scheme, cfg.eval_max_len)?;
        if (b.band_low..=b.band_high).contains(&acc) {
            return Ok(BaseModel {
                model,
                epochs: epoch,
                probe_accuracy: acc,
            });
        }
    }
    Err(Error::Setup(format!(
        "base model probe accuracy {acc:.4} outside [{}, {}] after {} epochs",
        b.band_low, b.band_high, b.max_epochs
    )))
}

fn in_band(b: &BaseModelConfig, model: ToyModel, epochs: usize, acc: f64) -> Result<BaseModel> {
    if (b.band_low..=b.band_high).contains(&acc) {
        Ok(BaseModel {
            model,
            epochs,
            probe_accuracy: acc,
        })
    } else {
        Err(Error::Setup(format!(
            "base model probe accuracy {acc:.4} outside [{}, {}] after {epochs} epochs",
            b.band_low, b.band_high
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRow {
    pub seed_index: usize,
    pub epochs: usize,
    pub probe_accuracy: f64,
    pub accuracy: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub seed_index: usize,
    pub method: Method,
    /// `None` when the run failed; see `error`.
    pub accuracy: Option<f64>,
    pub stderr: Option<f64>,
    pub n_examples: usize,
    pub dropped: usize,
    pub sampling_tokens: u64,
    pub tuning_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub mean_accuracy: Option<f64>,
    pub median_accuracy: Option<f64>,
    pub median_delta_vs_base: Option<f64>,
    pub sampling_tokens: u64,
    pub tuning_tokens: u64,
    pub sampling_ratio_vs_rft: Option<f64>,
    pub tuning_ratio_vs_rft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonChecks {
    /// RFT median ≥ SFT median; `None` when either is missing.
    pub rft_ge_sft: Option<bool>,
    /// UPFT median ≥ base median − 1 point.
    pub upft_non_degradation: Option<bool>,
    /// Reported only.
    pub upft_minus_sft_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config: ExperimentConfig,
    pub base: Vec<BaseRow>,
    pub base_median_accuracy: f64,
    pub rows: Vec<MethodRow>,
    pub summary: Vec<MethodSummary>,
    pub checks: ComparisonChecks,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

struct SeedRun {
    base: Result<BaseRow>,
    rows: Vec<MethodRow>,
}

fn run_method(
    cfg: &ExperimentConfig,
    base: &ToyModel,
    train_qs: &[Question],
    test_qs: &[Question],
    seed_index: usize,
    seed: u64,
    method: Method,
) -> MethodRow {
    let attempt = || -> Result<MethodRow> {
        let pcfg = PipelineConfig {
            method,
            seed: seeding::derive(seed, &format!("pipeline-{method}")),
            scheme: cfg.scheme,
            ..cfg.pipeline.clone()
        };
        let sampler = ToySampler::new(base.clone()).with_label(format!("base-seed-{seed_index}"));
        let data = build_dataset(train_qs, &sampler, &pcfg)?;
        let h = TrainHyper {
            seed: seeding::derive(seed, &format!("train-{method}")),
            ..cfg.train.clone()
        };
        let tuned = if data.examples.is_empty() {
            base.clone()
        } else {
            train(base, &data.examples, &h)?.model
        };
        let correct = count_correct(&tuned, test_qs, cfg.scheme, cfg.eval_max_len)?;
        let acc = correct as f64 / test_qs.len() as f64;
        Ok(MethodRow {
            seed_index,
            method,
            accuracy: Some(acc),
            stderr: Some(binomial_stderr(acc, test_qs.len())),
            n_examples: data.examples.len(),
            dropped: data.manifest.dropped.len(),
            sampling_tokens: data.budget.sampling_tokens,
            tuning_tokens: data.budget.tuning_tokens,
            error: None,
        })
    };
    attempt().unwrap_or_else(|e| {
        log::warn!("seed {seed_index} method {method} failed: {e}");
        MethodRow {
            seed_index,
            method,
            accuracy: None,
            stderr: None,
            n_examples: 0,
            dropped: 0,
            sampling_tokens: 0,
            tuning_tokens: 0,
            error: Some(e.to_string()),
        }
    })
}

fn run_seed(cfg: &ExperimentConfig, train_qs: &[Question], test_qs: &[Question], seed_index: usize) -> SeedRun {
    let seed = seeding::derive_index(cfg.seed, seed_index as u64);
    let base = match make_base_model(cfg, seed) {
        Ok(b) => b,
        Err(e) => {
            let msg = e.to_string();
            let rows = cfg
                .methods
                .iter()
                .map(|&method| MethodRow {
                    seed_index,
                    method,
                    accuracy: None,
                    stderr: None,
                    n_examples: 0,
                    dropped: 0,
                    sampling_tokens: 0,
                    tuning_tokens: 0,
                    error: Some(msg.clone()),
                })
                .collect();
            return SeedRun { base: Err(e), rows };
        }
    };
    let base_row = count_correct(&base.model, test_qs, cfg.scheme, cfg.eval_max_len).map(|c| {
        let acc = c as f64 / test_qs.len() as f64;
        BaseRow {
            seed_index,
            epochs: base.epochs,
            probe_accuracy: base.probe_accuracy,
            accuracy: acc,
            stderr: binomial_stderr(acc, test_qs.len()),
        }
    });
    let rows = cfg
        .methods
        .iter()
        .map(|&m| run_method(cfg, &base.model, train_qs, test_qs, seed_index, seed, m))
        .collect();
    SeedRun { base: base_row, rows }
}

/// Runs every (seed, method) cell. Rows are ordered by seed, then by the
/// configured method order; the report holds no timing data so reruns are
/// byte-identical.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let (train_qs, test_qs) = cfg.corpora()?;
    let seeds: Vec<usize> = (0..cfg.n_seeds).collect();
    let runs = parallel_map(&seeds, cfg.workers, |&s| run_seed(cfg, &train_qs, &test_qs, s));

    let mut base = Vec::new();
    let mut rows = Vec::new();
    let mut first_error = None;
    for run in runs {
        match run.base {
            Ok(b) => base.push(b),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
        rows.extend(run.rows);
    }
    if base.is_empty() {
        return Err(first_error.unwrap_or_else(|| Error::Setup("no base model could be built".into())));
    }
    let base_accs: Vec<f64> = base.iter().map(|b| b.accuracy).collect();
    let base_median = median(&base_accs).expect("non-empty");

    let mut by_method: BTreeMap<Method, Vec<&MethodRow>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(r.method).or_default().push(r);
    }
    let totals: Vec<(Method, TokenBudget)> = cfg
        .methods
        .iter()
        .map(|&m| {
            let budget = by_method.get(&m).into_iter().flatten().map(|r| TokenBudget {
                sampling_tokens: r.sampling_tokens,
                tuning_tokens: r.tuning_tokens,
                approximate: false,
            });
            (m, budget.sum())
        })
        .collect();
    let table = budget_report(&totals)?;
    let summary: Vec<MethodSummary> = cfg
        .methods
        .iter()
        .zip(&table.rows)
        .map(|(&m, budget_row)| {
            let accs: Vec<f64> = by_method.get(&m).into_iter().flatten().filter_map(|r| r.accuracy).collect();
            let med = median(&accs);
            MethodSummary {
                method: m,
                n_ok: accs.len(),
                mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
                median_accuracy: med,
                median_delta_vs_base: med.map(|v| v - base_median),
                sampling_tokens: budget_row.sampling_tokens,
                tuning_tokens: budget_row.tuning_tokens,
                sampling_ratio_vs_rft: budget_row.sampling_ratio_vs_rft,
                tuning_ratio_vs_rft: budget_row.tuning_ratio_vs_rft,
            }
        })
        .collect();
    let med_of = |m: Method| summary.iter().find(|s| s.method == m).and_then(|s| s.median_accuracy);
    let checks = ComparisonChecks {
        rft_ge_sft: med_of(Method::Rft).zip(med_of(Method::Sft)).map(|(r, s)| r >= s),
        upft_non_degradation: med_of(Method::Upft).map(|u| u >= base_median - 0.01),
        upft_minus_sft_median: med_of(Method::Upft).zip(med_of(Method::Sft)).map(|(u, s)| u - s),
    };
    Ok(ComparisonReport {
        config: cfg.clone(),
        base,
        base_median_accuracy: base_median,
        rows,
        summary,
        checks,
    })
}

impl ComparisonReport {
    /// One row per (seed, method), base rows first.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed_index", "method", "accuracy", "stderr", "n_examples", "dropped", "sampling_tokens", "tuning_tokens", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.base {
            w.write_record([
                b.seed_index.to_string(),
                "base".to_string(),
                b.accuracy.to_string(),
                b.stderr.to_string(),
                "0".into(),
                "0".into(),
                "0".into(),
                "0".into(),
                String::new(),
            ])?;
        }
        for r in &self.rows {
            w.write_record([
                r.seed_index.to_string(),
                r.method.to_string(),
                opt(r.accuracy),
                opt(r.stderr),
                r.n_examples.to_string(),
                r.dropped.to_string(),
                r.sampling_tokens.to_string(),
                r.tuning_tokens.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Human-readable summary table.
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let ratio = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!("base median accuracy: {:.1}%\n", 100.0 * self.base_median_accuracy);
        writeln!(
            out,
            "{:<22} {:>4} {:>8} {:>8} {:>8} {:>12} {:>12} {:>9}",
            "method", "ok", "mean%", "median%", "delta", "sampling", "tuning", "samp/RFT"
        )
        .unwrap();
        for s in &self.summary {
            writeln!(
                out,
                "{:<22} {:>4} {:>8} {:>8} {:>8} {:>12} {:>12} {:>9}",
                s.method.to_string(),
                s.n_ok,
                pct(s.mean_accuracy),
                pct(s.median_accuracy),
                pct(s.median_delta_vs_base),
                s.sampling_tokens,
                s.tuning_tokens,
                ratio(s.sampling_ratio_vs_rft)
            )
            .unwrap();
        }
        let flag = |b: Option<bool>| b.map_or("n/a", |b| if b { "yes" } else { "no" });
        writeln!(out, "RFT median >= SFT median: {}", flag(self.checks.rft_ge_sft)).unwrap();
        writeln!(out, "UPFT median >= base median - 1pt: {}", flag(self.checks.upft_non_degradation)).unwrap();
        writeln!(out, "UPFT - SFT median: {}", pct(self.checks.upft_minus_sft_median)).unwrap();
        out
    }
}

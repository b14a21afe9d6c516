//! Training-set construction for UPFT, unfiltered SFT, RFT and
//! label-filtered UPFT, with token accounting.

mod budget;
mod template;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_corpus, ExtractionScheme, Question, Trajectory};
use crate::error::{Error, ErrorClass, Result};
use crate::sampler::{count_tokens, CompletionRequest, SampleResult, Sampler, SamplerIdentity};
use crate::seeding;

pub use budget::{budget_report, BudgetRow, BudgetTable, TokenBudget};
pub use template::{apply_template, template_text, PREFIX_INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Upft,
    Sft,
    Rft,
    UpftLabelFiltered,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sft, Method::Rft, Method::Upft, Method::UpftLabelFiltered];

    pub fn needs_labels(self) -> bool {
        matches!(self, Method::Rft | Method::UpftLabelFiltered)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Upft => "upft",
            Method::Sft => "sft",
            Method::Rft => "rft",
            Method::UpftLabelFiltered => "upft_label_filtered",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "upft" => Ok(Method::Upft),
            "sft" => Ok(Method::Sft),
            "rft" => Ok(Method::Rft),
            "upft_label_filtered" | "upft_lf" => Ok(Method::UpftLabelFiltered),
            other => Err(Error::validation(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub method: Method,
    /// Prefix length `t` in sampler-native tokens.
    pub prefix_len: usize,
    /// Fraction `p` of questions routed to full-trace structure tuning.
    pub structure_ratio: f64,
    /// Samples per question `K` for the label-using methods.
    pub n_samples: usize,
    pub temperature: f64,
    pub max_sample_tokens: usize,
    pub seed: u64,
    pub scheme: ExtractionScheme,
    /// Questions sampled concurrently.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Upft,
            prefix_len: 8,
            structure_ratio: 0.1,
            n_samples: 16,
            temperature: 0.7,
            max_sample_tokens: 64,
            seed: 0,
            scheme: ExtractionScheme::Synthetic,
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_len == 0 {
            return Err(Error::validation("prefix length t must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples K must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.structure_ratio) {
            return Err(Error::validation("structure ratio p must be in [0, 1]"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::validation("temperature must be >= 0"));
        }
        if self.max_sample_tokens == 0 {
            return Err(Error::validation("max_sample_tokens must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Prefix,
    Full,
}

/// One JSONL dataset line. Loss is taken on `target` only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub question_id: String,
    pub prompt: String,
    pub target: String,
    pub kind: ExampleKind,
    pub method: Method,
    pub t: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExampleKind>,
    pub sample_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_correct: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_index: Option<usize>,
    pub target_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuestion {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub method: Method,
    pub config: PipelineConfig,
    pub sampler: SamplerIdentity,
    pub n_questions: usize,
    pub n_emitted: usize,
    /// RFT-family questions without any correct sample.
    pub dropped: Vec<String>,
    /// Questions the sampler could not serve; set `partial`.
    pub failed: Vec<FailedQuestion>,
    pub partial: bool,
    pub budget: TokenBudget,
    pub questions: Vec<QuestionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<TrainingExample>,
    pub budget: TokenBudget,
    pub manifest: DatasetManifest,
}

/// Ids routed to full-trace structure tuning: the sorted ids are shuffled
/// with `seed` and the first `round(p·n)` are taken. Independent of input
/// order.
pub fn structure_split(ids: &[&str], p: f64, seed: u64) -> BTreeSet<String> {
    let mut sorted: Vec<&str> = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n_full = (p * sorted.len() as f64).round() as usize;
    let mut rng = seeding::rng(seeding::derive(seed, "structure-split"));
    sorted.shuffle(&mut rng);
    sorted.into_iter().take(n_full).map(str::to_string).collect()
}

/// Runs `f` over `items` on up to `workers` threads; output order matches
/// input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

struct Outcome {
    example: Option<TrainingExample>,
    record: QuestionRecord,
    budget: TokenBudget,
    dropped: bool,
}

fn budget_of(results: &[SampleResult]) -> TokenBudget {
    let counts: Vec<_> = results.iter().map(count_tokens).collect();
    TokenBudget {
        sampling_tokens: counts.iter().map(|c| c.count as u64).sum(),
        tuning_tokens: 0,
        approximate: counts.iter().any(|c| c.approximate),
    }
}

fn example(q: &Question, cfg: &PipelineConfig, prompt: String, target: String, kind: ExampleKind) -> TrainingExample {
    TrainingExample {
        question_id: q.id.clone(),
        prompt,
        target,
        kind,
        method: cfg.method,
        t: cfg.prefix_len,
        seed: cfg.seed,
    }
}

fn question_seed(cfg: &PipelineConfig, q: &Question) -> u64 {
    seeding::derive(cfg.seed, &q.id)
}

/// Draws one sample and emits it as a prefix (templated prompt, first `t`
/// tokens) or as a full trace (plain prompt).
fn single_sample(q: &Question, sampler: &dyn Sampler, cfg: &PipelineConfig, kind: ExampleKind) -> Result<Outcome> {
    let (prompt, max_tokens) = match kind {
        ExampleKind::Prefix => (apply_template(q), cfg.prefix_len),
        ExampleKind::Full => (q.prompt_text.clone(), cfg.max_sample_tokens),
    };
    let req = CompletionRequest::new(prompt.clone(), 1, max_tokens, cfg.temperature, question_seed(cfg, q));
    let results = sampler.sample_completions(&req)?;
    let first = results
        .first()
        .ok_or_else(|| Error::Protocol {
            message: format!("sampler returned no completion for {}", q.id),
            raw: String::new(),
        })?
        .clone();
    let mut budget = budget_of(&results);
    let kept = match kind {
        ExampleKind::Prefix => sampler.truncate(&first, cfg.prefix_len),
        ExampleKind::Full => first.clone(),
    };
    let target_tokens = match kind {
        ExampleKind::Prefix => count_tokens(&first).count.min(cfg.prefix_len),
        ExampleKind::Full => count_tokens(&first).count,
    };
    budget.tuning_tokens = target_tokens as u64;
    Ok(Outcome {
        example: Some(example(q, cfg, prompt, kept.text, kind)),
        record: QuestionRecord {
            id: q.id.clone(),
            kind: Some(kind),
            sample_tokens: results.iter().map(|r| count_tokens(r).count).collect(),
            n_correct: None,
            selected_index: None,
            target_tokens,
        },
        budget,
        dropped: false,
    })
}

/// Draws `K` full samples, keeps the correct ones and picks one uniformly.
fn filtered_sample(q: &Question, sampler: &dyn Sampler, cfg: &PipelineConfig, kind: ExampleKind) -> Result<Outcome> {
    let seed = question_seed(cfg, q);
    let req = CompletionRequest::new(q.prompt_text.clone(), cfg.n_samples, cfg.max_sample_tokens, cfg.temperature, seed);
    let results = sampler.sample_completions(&req)?;
    let mut budget = budget_of(&results);
    let correct: Vec<usize> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let traj = Trajectory::from_text(&q.id, r.text.clone(), count_tokens(r).count, cfg.temperature);
            crate::corpus::is_correct(&traj, q, cfg.scheme).ok()?.then_some(i)
        })
        .collect();
    let mut record = QuestionRecord {
        id: q.id.clone(),
        kind: None,
        sample_tokens: results.iter().map(|r| count_tokens(r).count).collect(),
        n_correct: Some(correct.len()),
        selected_index: None,
        target_tokens: 0,
    };
    if correct.is_empty() {
        return Ok(Outcome {
            example: None,
            record,
            budget,
            dropped: true,
        });
    }
    let mut rng = seeding::rng(seeding::derive(seed, "uniform-select"));
    let chosen = correct[rng.random_range(0..correct.len())];
    let selected = &results[chosen];
    let (prompt, target, target_tokens) = match kind {
        ExampleKind::Full => (q.prompt_text.clone(), selected.text.clone(), count_tokens(selected).count),
        ExampleKind::Prefix => {
            let cut = sampler.truncate(selected, cfg.prefix_len);
            (apply_template(q), cut.text, count_tokens(selected).count.min(cfg.prefix_len))
        }
    };
    budget.tuning_tokens = target_tokens as u64;
    record.kind = Some(kind);
    record.selected_index = Some(chosen);
    record.target_tokens = target_tokens;
    Ok(Outcome {
        example: Some(example(q, cfg, prompt, target, kind)),
        record,
        budget,
        dropped: false,
    })
}

fn assemble(
    questions: &[Question],
    sampler: &dyn Sampler,
    cfg: &PipelineConfig,
    requests_per_question: u64,
    per_question: impl Fn(&Question) -> Result<Outcome> + Sync,
) -> Result<Dataset> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(Error::validation("question list is empty"));
    }
    validate_corpus(questions)?;
    sampler.preflight(requests_per_question * questions.len() as u64)?;

    let mut ordered: Vec<&Question> = questions.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let outcomes = parallel_map(&ordered, cfg.workers, |q| per_question(q));

    let mut examples = Vec::new();
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut failed = Vec::new();
    let mut budget = TokenBudget::default();
    for (q, outcome) in ordered.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                budget += o.budget;
                if o.dropped {
                    dropped.push(q.id.clone());
                }
                examples.extend(o.example);
                records.push(o.record);
            }
            Err(e) if e.class() == ErrorClass::Transport => {
                log::warn!("sampling failed for {}: {e}", q.id);
                failed.push(FailedQuestion {
                    id: q.id.clone(),
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let manifest = DatasetManifest {
        method: cfg.method,
        config: cfg.clone(),
        sampler: sampler.identity(),
        n_questions: questions.len(),
        n_emitted: examples.len(),
        dropped,
        partial: !failed.is_empty(),
        failed,
        budget,
        questions: records,
    };
    Ok(Dataset {
        examples,
        budget,
        manifest,
    })
}

fn require_method(cfg: &PipelineConfig, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "config method {} does not match builder for {allowed:?}",
            cfg.method
        )))
    }
}

fn require_labels(questions: &[Question]) -> Result<()> {
    match questions.iter().find(|q| q.reference_answer.is_none()) {
        Some(q) => Err(Error::Precondition(format!("question {} has no reference answer", q.id))),
        None => Ok(()),
    }
}

/// Prefix tuning plus a `p` fraction of unfiltered full traces.
pub fn build_upft(questions: &[Question], sampler: &dyn Sampler, cfg: &PipelineConfig) -> Result<Dataset> {
    require_method(cfg, &[Method::Upft])?;
    let ids: Vec<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    let full = structure_split(&ids, cfg.structure_ratio, cfg.seed);
    assemble(questions, sampler, cfg, sampler.requests_for(1), |q| {
        let kind = if full.contains(&q.id) { ExampleKind::Full } else { ExampleKind::Prefix };
        single_sample(q, sampler, cfg, kind)
    })
}

/// One unfiltered full sample per question.
pub fn build_sft(questions: &[Question], sampler: &dyn Sampler, cfg: &PipelineConfig) -> Result<Dataset> {
    require_method(cfg, &[Method::Sft])?;
    assemble(questions, sampler, cfg, sampler.requests_for(1), |q| {
        single_sample(q, sampler, cfg, ExampleKind::Full)
    })
}

/// `K` samples per question, one uniformly chosen correct trace kept.
pub fn build_rft(questions: &[Question], sampler: &dyn Sampler, cfg: &PipelineConfig) -> Result<Dataset> {
    require_method(cfg, &[Method::Rft])?;
    require_labels(questions)?;
    assemble(questions, sampler, cfg, sampler.requests_for(cfg.n_samples), |q| {
        filtered_sample(q, sampler, cfg, ExampleKind::Full)
    })
}

/// RFT selection, then the selected trace is cut to `t` tokens (or kept
/// whole for the structure-tuning split).
pub fn build_upft_label_filtered(questions: &[Question], sampler: &dyn Sampler, cfg: &PipelineConfig) -> Result<Dataset> {
    require_method(cfg, &[Method::UpftLabelFiltered])?;
    require_labels(questions)?;
    let ids: Vec<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    let full = structure_split(&ids, cfg.structure_ratio, cfg.seed);
    assemble(questions, sampler, cfg, sampler.requests_for(cfg.n_samples), |q| {
        let kind = if full.contains(&q.id) { ExampleKind::Full } else { ExampleKind::Prefix };
        filtered_sample(q, sampler, cfg, kind)
    })
}

/// Dispatches on `cfg.method`.
pub fn build_dataset(questions: &[Question], sampler: &dyn Sampler, cfg: &PipelineConfig) -> Result<Dataset> {
    match cfg.method {
        Method::Upft => build_upft(questions, sampler, cfg),
        Method::Sft => build_sft(questions, sampler, cfg),
        Method::Rft => build_rft(questions, sampler, cfg),
        Method::UpftLabelFiltered => build_upft_label_filtered(questions, sampler, cfg),
    }
}

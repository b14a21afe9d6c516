//! Exact evaluation of `log p(y|x)`, its Jensen lower bound
//! `Σ_r p(r|x) log p(y|r,x)`, and the same bound regrouped by prefix:
//! `Σ_{r<t} p(r<t|x) · L(r<t, x)`, by enumerating every trace of a
//! [`ToyModel`].

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_answer_text, normalize_answer, ExtractionScheme, SyntheticVocab, TokenId};
use crate::error::{Error, Result};
use crate::seeding;
use crate::toy_model::ToyModel;

/// Default cap on enumerated paths.
pub const ENUMERATION_BUDGET: u64 = 10_000_000;
/// `log 1e-300`, used in place of `log 0`.
pub const LOG_CLAMP_FLOOR: f64 = -690.775_527_898_213_7;
/// Absolute tolerance of every identity and inequality check.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Traces cut at `max_len` without an end token are kept; total mass is 1.
    #[default]
    KeepTruncated,
    /// Only traces ending with the end token are returned.
    DropUnterminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnumOptions {
    pub temperature: f64,
    pub truncation: Truncation,
    pub budget: u64,
}

impl Default for EnumOptions {
    fn default() -> Self {
        EnumOptions {
            temperature: 1.0,
            truncation: Truncation::KeepTruncated,
            budget: ENUMERATION_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedTrace {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    pub traces: Vec<EnumeratedTrace>,
    pub max_len: usize,
    /// Sum of returned trace probabilities.
    pub total_mass: f64,
    /// Probability mass not represented by the returned traces.
    pub uncovered_mass: f64,
    /// Worst-case path count used for the budget check.
    pub path_bound: u64,
}

/// Worst-case number of leaves for a `vocab`-way tree of depth `max_len`
/// where the end token (if any) stops a branch.
pub fn path_bound(vocab: usize, max_len: usize, has_end: bool) -> u64 {
    let sat = |x: u128| x.min(u128::from(u64::MAX)) as u64;
    let v = vocab as u128;
    if !has_end {
        return sat(v.checked_pow(max_len as u32).unwrap_or(u128::MAX));
    }
    let branch = v - 1;
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(branch);
    }
    sat(total.saturating_add(level))
}

/// Depth-first enumeration in token-id order. Branches whose probability
/// underflows to exactly zero are skipped.
pub fn enumerate_traces(m: &ToyModel, prompt: &[TokenId], max_len: usize, opts: &EnumOptions) -> Result<Enumeration> {
    m.check_tokens(prompt)?;
    if !(opts.temperature > 0.0) {
        return Err(Error::validation("enumeration temperature must be positive"));
    }
    let bound = path_bound(m.vocab_size(), max_len, m.end_token().is_some());
    if bound > opts.budget {
        return Err(Error::Resource(format!(
            "enumeration of V={} to length {max_len} needs up to {bound} paths, budget is {}",
            m.vocab_size(),
            opts.budget
        )));
    }
    let mut traces = Vec::new();
    let mut history = prompt.to_vec();
    let mut trace = Vec::with_capacity(max_len);
    walk(m, opts, max_len, &mut history, &mut trace, 0.0, &mut traces);
    let total_mass: f64 = traces.iter().map(|t| t.log_prob.exp()).sum();
    Ok(Enumeration {
        traces,
        max_len,
        total_mass,
        uncovered_mass: (1.0 - total_mass).max(0.0),
        path_bound: bound,
    })
}

fn walk(
    m: &ToyModel,
    opts: &EnumOptions,
    max_len: usize,
    history: &mut Vec<TokenId>,
    trace: &mut Vec<TokenId>,
    logp: f64,
    out: &mut Vec<EnumeratedTrace>,
) {
    if trace.len() == max_len {
        if opts.truncation == Truncation::KeepTruncated {
            out.push(EnumeratedTrace {
                tokens: trace.clone(),
                log_prob: logp,
                terminated: false,
            });
        }
        return;
    }
    let step = m.log_probs(history, opts.temperature);
    for (tok, &lp) in step.iter().enumerate() {
        let next = logp + lp;
        if next.exp() == 0.0 {
            continue;
        }
        let tok = tok as TokenId;
        trace.push(tok);
        if Some(tok) == m.end_token() {
            out.push(EnumeratedTrace {
                tokens: trace.clone(),
                log_prob: next,
                terminated: true,
            });
        } else {
            history.push(tok);
            walk(m, opts, max_len, history, trace, next, out);
            history.pop();
        }
        trace.pop();
    }
}

/// Reads a final answer out of a token trace.
pub trait AnswerReader: Send + Sync {
    fn read(&self, trace: &[TokenId]) -> Option<String>;
    fn describe(&self) -> String;
}

/// Renders the trace with the synthetic vocabulary and applies a scheme.
#[derive(Debug, Clone, Copy)]
pub struct SchemeReader(pub ExtractionScheme);

impl AnswerReader for SchemeReader {
    fn read(&self, trace: &[TokenId]) -> Option<String> {
        extract_answer_text(&SyntheticVocab.decode(trace), self.0)
    }

    fn describe(&self) -> String {
        format!("scheme:{}", self.0)
    }
}

/// The answer is the last token before the end token, as a decimal id.
/// Used for abstract small-vocabulary models.
#[derive(Debug, Clone, Copy)]
pub struct FinalTokenReader {
    pub end_token: Option<TokenId>,
}

impl AnswerReader for FinalTokenReader {
    fn read(&self, trace: &[TokenId]) -> Option<String> {
        let body = match (trace.last(), self.end_token) {
            (Some(&l), Some(e)) if l == e => &trace[..trace.len() - 1],
            _ => trace,
        };
        body.last().map(|t| t.to_string())
    }

    fn describe(&self) -> String {
        "final-token".to_string()
    }
}

/// Realization of `p(y | r, x)` for a deterministic answer reader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnswerLikelihood {
    /// 1 if the read answer equals `y`, else 0.
    Indicator,
    /// `1 - epsilon` on a match, `epsilon` otherwise.
    Smoothed { epsilon: f64 },
}

impl Default for AnswerLikelihood {
    fn default() -> Self {
        AnswerLikelihood::Indicator
    }
}

impl AnswerLikelihood {
    pub const DEFAULT_EPSILON: f64 = 0.1;

    pub fn smoothed() -> Self {
        AnswerLikelihood::Smoothed {
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn prob(self, matched: bool) -> f64 {
        match (self, matched) {
            (AnswerLikelihood::Indicator, true) => 1.0,
            (AnswerLikelihood::Indicator, false) => 0.0,
            (AnswerLikelihood::Smoothed { epsilon }, true) => 1.0 - epsilon,
            (AnswerLikelihood::Smoothed { epsilon }, false) => epsilon,
        }
    }
}

impl fmt::Display for AnswerLikelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerLikelihood::Indicator => f.write_str("indicator"),
            AnswerLikelihood::Smoothed { epsilon } => write!(f, "smoothed(epsilon={epsilon})"),
        }
    }
}

/// `log p` with `log 0` replaced by [`LOG_CLAMP_FLOOR`]; the flag reports
/// whether the clamp fired.
pub fn clamped_log(p: f64) -> (f64, bool) {
    if p > 0.0 {
        (p.ln().max(LOG_CLAMP_FLOOR), p.ln() < LOG_CLAMP_FLOOR)
    } else {
        (LOG_CLAMP_FLOOR, true)
    }
}

/// One bound computation: a model, prompt `x`, answer `y` and how
/// `p(y|r,x)` is realized.
pub struct BoundProblem<'a> {
    pub model: &'a ToyModel,
    pub prompt: Vec<TokenId>,
    pub answer: String,
    pub max_len: usize,
    pub reader: &'a dyn AnswerReader,
    pub likelihood: AnswerLikelihood,
    pub options: EnumOptions,
}

/// Enumerated traces with their answer log-likelihoods.
#[derive(Debug, Clone)]
pub struct ScoredTraces {
    pub enumeration: Enumeration,
    pub probs: Vec<f64>,
    pub answer_probs: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub clamped: Vec<bool>,
}

impl ScoredTraces {
    pub fn clamp_events(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }
}

impl BoundProblem<'_> {
    pub fn score(&self) -> Result<ScoredTraces> {
        let enumeration = enumerate_traces(self.model, &self.prompt, self.max_len, &self.options)?;
        let target = normalize_answer(&self.answer);
        let mut probs = Vec::with_capacity(enumeration.traces.len());
        let mut answer_probs = Vec::with_capacity(enumeration.traces.len());
        let mut log_likelihoods = Vec::with_capacity(enumeration.traces.len());
        let mut clamped = Vec::with_capacity(enumeration.traces.len());
        for tr in &enumeration.traces {
            let matched = self.reader.read(&tr.tokens).is_some_and(|a| normalize_answer(&a) == target);
            let a = self.likelihood.prob(matched);
            let (ll, c) = clamped_log(a);
            probs.push(tr.log_prob.exp());
            answer_probs.push(a);
            log_likelihoods.push(ll);
            clamped.push(c);
        }
        Ok(ScoredTraces {
            enumeration,
            probs,
            answer_probs,
            log_likelihoods,
            clamped,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedValue {
    pub value: f64,
    pub clamp_events: usize,
}

/// `log Σ_r p(r|x) p(y|r,x)`.
pub fn marginal_answer_log_prob(problem: &BoundProblem<'_>) -> Result<ClampedValue> {
    Ok(marginal_from(&problem.score()?))
}

fn marginal_from(scored: &ScoredTraces) -> ClampedValue {
    let total: f64 = scored.probs.iter().zip(&scored.answer_probs).map(|(p, a)| p * a).sum();
    let (value, c) = clamped_log(total);
    ClampedValue {
        value,
        clamp_events: usize::from(c),
    }
}

/// `Σ_r p(r|x) log p(y|r,x)`.
pub fn jensen_lower_bound(problem: &BoundProblem<'_>) -> Result<ClampedValue> {
    Ok(jensen_from(&problem.score()?))
}

fn jensen_from(scored: &ScoredTraces) -> ClampedValue {
    let value = scored.probs.iter().zip(&scored.log_likelihoods).map(|(p, ll)| p * ll).sum();
    ClampedValue {
        value,
        clamp_events: scored.clamp_events(),
    }
}

/// Coverage `p(r<t|x)` and accuracy `L(r<t, x)` of one prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixTerm {
    pub t: usize,
    pub prefix: Vec<TokenId>,
    pub prior: f64,
    pub l_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixBound {
    pub t: usize,
    pub value: f64,
    pub terms: Vec<PrefixTerm>,
    pub clamp_events: usize,
}

pub fn prefix_lower_bound(problem: &BoundProblem<'_>, t: usize) -> Result<PrefixBound> {
    Ok(prefix_from(&problem.score()?, t))
}

/// Groups traces by their first `t` tokens (shorter traces form their own
/// group) and sums `prior · L` over groups in prefix order.
fn prefix_from(scored: &ScoredTraces, t: usize) -> PrefixBound {
    let mut groups: BTreeMap<&[TokenId], Vec<usize>> = BTreeMap::new();
    for (i, tr) in scored.enumeration.traces.iter().enumerate() {
        let cut = t.min(tr.tokens.len());
        groups.entry(&tr.tokens[..cut]).or_default().push(i);
    }
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(groups.len());
    for (prefix, members) in groups {
        let prior: f64 = members.iter().map(|&i| scored.probs[i]).sum();
        let l_value: f64 = members
            .iter()
            .map(|&i| (scored.probs[i] / prior) * scored.log_likelihoods[i])
            .sum();
        value += prior * l_value;
        terms.push(PrefixTerm {
            t,
            prefix: prefix.to_vec(),
            prior,
            l_value,
        });
    }
    PrefixBound {
        t,
        value,
        terms,
        clamp_events: scored.clamp_events(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationLimits {
    pub max_len: usize,
    pub n_traces: usize,
    pub total_mass: f64,
    pub uncovered_mass: f64,
    pub path_bound: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Vec<TokenId>>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.invariant)?;
        if let Some(t) = self.t {
            write!(f, " at t={t}")?;
        }
        if let Some(p) = &self.prefix {
            write!(f, " prefix {p:?}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub answer: String,
    pub likelihood: AnswerLikelihood,
    pub reader: String,
    pub log_p_y_given_x: f64,
    pub jensen_bound: f64,
    pub prefix_bound_by_t: BTreeMap<usize, f64>,
    pub per_prefix_terms: Vec<PrefixTerm>,
    pub enumeration_limits: EnumerationLimits,
    pub clamp_events: usize,
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

const NOTES: [&str; 2] = [
    "p(y|r,x) is realized by a deterministic answer reader (indicator or smoothed); this realization is a modelling choice of the toolkit",
    "under exact expectations the prefix bound equals the Jensen bound for every t; a coverage/accuracy trade-off in t only appears when the expectations are estimated from finite samples",
];

/// Computes all three quantities over `t_grid` and records every violated
/// invariant in the report.
pub fn verify_bounds(problem: &BoundProblem<'_>, t_grid: &[usize]) -> Result<BoundReport> {
    let scored = problem.score()?;
    let marginal = marginal_from(&scored);
    let jensen = jensen_from(&scored);
    let mut grid = t_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut prefix_bound_by_t = BTreeMap::new();
    let mut per_prefix_terms = Vec::new();
    for &t in &grid {
        let pb = prefix_from(&scored, t);
        prefix_bound_by_t.insert(t, pb.value);
        per_prefix_terms.extend(pb.terms);
    }
    let e = &scored.enumeration;
    let mut report = BoundReport {
        answer: problem.answer.clone(),
        likelihood: problem.likelihood,
        reader: problem.reader.describe(),
        log_p_y_given_x: marginal.value,
        jensen_bound: jensen.value,
        prefix_bound_by_t,
        per_prefix_terms,
        enumeration_limits: EnumerationLimits {
            max_len: e.max_len,
            n_traces: e.traces.len(),
            total_mass: e.total_mass,
            uncovered_mass: e.uncovered_mass,
            path_bound: e.path_bound,
        },
        clamp_events: marginal.clamp_events + jensen.clamp_events,
        violations: Vec::new(),
        notes: NOTES.iter().map(|s| s.to_string()).collect(),
    };
    report.violations = report.check();
    Ok(report)
}

impl BoundReport {
    /// Re-derives every invariant from the stored numbers. Equality checks
    /// are skipped when clamps occurred.
    pub fn check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let tol = BOUND_TOLERANCE;
        if !(self.jensen_bound <= self.log_p_y_given_x + tol) {
            out.push(Violation {
                invariant: "jensen_bound <= log p(y|x)".into(),
                t: None,
                prefix: None,
                detail: format!("{} > {}", self.jensen_bound, self.log_p_y_given_x),
            });
        }
        let mut by_t: BTreeMap<usize, Vec<&PrefixTerm>> = BTreeMap::new();
        for term in &self.per_prefix_terms {
            by_t.entry(term.t).or_default().push(term);
        }
        for (&t, &value) in &self.prefix_bound_by_t {
            let terms = by_t.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let mass: f64 = terms.iter().map(|p| p.prior).sum();
            if (mass - self.enumeration_limits.total_mass).abs() > tol {
                out.push(Violation {
                    invariant: "prefix priors sum to enumerated mass".into(),
                    t: Some(t),
                    prefix: None,
                    detail: format!("{mass} vs {}", self.enumeration_limits.total_mass),
                });
            }
            if self.clamp_events > 0 {
                continue;
            }
            let recomposed: f64 = terms.iter().map(|p| p.prior * p.l_value).sum();
            if (recomposed - value).abs() > tol {
                let worst = terms
                    .iter()
                    .max_by(|a, b| (a.prior * a.l_value).abs().total_cmp(&(b.prior * b.l_value).abs()));
                out.push(Violation {
                    invariant: "sum of prior * L equals prefix bound".into(),
                    t: Some(t),
                    prefix: worst.map(|p| p.prefix.clone()),
                    detail: format!("{recomposed} vs {value}"),
                });
            }
            if (value - self.jensen_bound).abs() > tol {
                out.push(Violation {
                    invariant: "prefix bound equals jensen bound".into(),
                    t: Some(t),
                    prefix: None,
                    detail: format!("{value} vs {}", self.jensen_bound),
                });
            }
        }
        let ts: Vec<usize> = by_t.keys().copied().collect();
        for pair in ts.windows(2) {
            let (coarse, fine) = (pair[0], pair[1]);
            let parents: std::collections::BTreeSet<&[TokenId]> =
                by_t[&coarse].iter().map(|p| p.prefix.as_slice()).collect();
            for child in &by_t[&fine] {
                let cut = coarse.min(child.prefix.len());
                if !parents.contains(&child.prefix[..cut]) {
                    out.push(Violation {
                        invariant: "prefix partition refines".into(),
                        t: Some(fine),
                        prefix: Some(child.prefix.clone()),
                        detail: format!("no parent group at t={coarse}"),
                    });
                }
            }
        }
        out
    }

    pub fn ensure_ok(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::Verification(format!(
                "{} violation(s); first: {v}",
                self.violations.len()
            ))),
        }
    }

    /// Rows of `(t, prefix count, bound value)`.
    pub fn table(&self) -> Vec<(usize, usize, f64)> {
        self.prefix_bound_by_t
            .iter()
            .map(|(&t, &v)| (t, self.per_prefix_terms.iter().filter(|p| p.t == t).count(), v))
            .collect()
    }
}

/// A seeded random small model for property suites.
pub struct RandomInstance {
    pub model: ToyModel,
    pub prompt: Vec<TokenId>,
    pub answer: String,
    pub max_len: usize,
}

/// `V` in 2..=4, order 1..=2, optional end token, logits ~ U(-2, 2),
/// `max_len` in 1..=6.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = seeding::rng(seeding::derive(seed, "bounds-random-instance"));
    let vocab = rng.random_range(2..=4usize);
    let order = rng.random_range(1..=2usize);
    let end = rng.random_bool(0.6).then(|| rng.random_range(0..vocab as TokenId));
    let max_len = rng.random_range(1..=6usize);
    let mut model = ToyModel::uniform(vocab, order, end).expect("valid random model");
    // every reachable context of length <= order, including padded ones
    let mut contexts: Vec<Vec<TokenId>> = vec![vec![]];
    for len in 1..=order {
        let mut next = Vec::new();
        for c in contexts.iter().filter(|c| c.len() == len - 1) {
            for t in 0..vocab as TokenId {
                let mut n = c.clone();
                n.push(t);
                next.push(n);
            }
        }
        contexts.extend(next);
    }
    for ctx in contexts {
        let row = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        model.set_logits(&ctx, row).expect("finite logits");
    }
    let prompt = if rng.random_bool(0.5) {
        vec![rng.random_range(0..vocab as TokenId)]
    } else {
        vec![]
    };
    let answer = rng.random_range(0..vocab).to_string();
    RandomInstance {
        model,
        prompt,
        answer,
        max_len,
    }
}

/// Outcome of [`random_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub likelihood: AnswerLikelihood,
    pub n_instances: usize,
    /// Instances without clamp events, on which the prefix identity is checked.
    pub n_clamp_free: usize,
    pub n_prefix_checks: usize,
    /// Largest `|prefix bound - jensen bound|` over clamp-free instances.
    pub max_identity_gap: f64,
    /// Largest `jensen bound - log p(y|x)`; non-positive when the chain holds.
    pub max_jensen_excess: f64,
    pub failures: Vec<SuiteFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub seed: u64,
    pub violation: Violation,
}

/// Verifies every instance `random_instance(seed)` for `seed` in `seeds`
/// over `t = 0..=max_len`, reading the answer from the final token.
pub fn random_suite(seeds: std::ops::Range<u64>, likelihood: AnswerLikelihood) -> Result<SuiteSummary> {
    let mut out = SuiteSummary {
        likelihood,
        n_instances: 0,
        n_clamp_free: 0,
        n_prefix_checks: 0,
        max_identity_gap: 0.0,
        max_jensen_excess: f64::NEG_INFINITY,
        failures: Vec::new(),
    };
    for seed in seeds {
        let inst = random_instance(seed);
        let reader = FinalTokenReader {
            end_token: inst.model.end_token(),
        };
        let problem = BoundProblem {
            model: &inst.model,
            prompt: inst.prompt.clone(),
            answer: inst.answer.clone(),
            max_len: inst.max_len,
            reader: &reader,
            likelihood,
            options: EnumOptions::default(),
        };
        let grid: Vec<usize> = (0..=inst.max_len).collect();
        let report = verify_bounds(&problem, &grid)?;
        out.n_instances += 1;
        out.max_jensen_excess = out.max_jensen_excess.max(report.jensen_bound - report.log_p_y_given_x);
        if report.clamp_events == 0 {
            out.n_clamp_free += 1;
            out.n_prefix_checks += grid.len();
            for v in report.prefix_bound_by_t.values() {
                out.max_identity_gap = out.max_identity_gap.max((v - report.jensen_bound).abs());
            }
        }
        out.failures
            .extend(report.violations.into_iter().map(|violation| SuiteFailure { seed, violation }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem<'a>(m: &'a ToyModel, reader: &'a dyn AnswerReader, y: &str, max_len: usize, lik: AnswerLikelihood) -> BoundProblem<'a> {
        BoundProblem {
            model: m,
            prompt: vec![],
            answer: y.to_string(),
            max_len,
            reader,
            likelihood: lik,
            options: EnumOptions::default(),
        }
    }

    /// Always emits `A 5 E` (synthetic ids 15, 5, 16).
    fn deterministic_a5e() -> ToyModel {
        let mut m = ToyModel::uniform(SyntheticVocab::SIZE, 1, Some(SyntheticVocab::END)).unwrap();
        m.set_logit(&[], SyntheticVocab::ANSWER, 1000.0).unwrap();
        m.set_logit(&[SyntheticVocab::ANSWER], 5, 1000.0).unwrap();
        m.set_logit(&[5], SyntheticVocab::END, 1000.0).unwrap();
        m
    }

    /// First token picks branch 0 (prob 0.25) or 1; branch 0 answers 1.
    fn two_branch() -> ToyModel {
        let mut m = ToyModel::uniform(3, 1, Some(2)).unwrap();
        m.set_logits(&[], vec![0.0, 3f64.ln(), -1000.0]).unwrap();
        m.set_logits(&[0], vec![-1000.0, -1000.0, 0.0]).unwrap();
        m.set_logits(&[1], vec![-1000.0, -1000.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn path_bound_values() {
        assert_eq!(path_bound(2, 2, false), 4);
        // V=3 with end: 1 + 2 + 4 terminated + 8 cut
        assert_eq!(path_bound(3, 3, true), 15);
        assert_eq!(path_bound(18, 30, false), u64::MAX);
    }

    #[test]
    fn deterministic_model_single_trace() {
        let m = deterministic_a5e();
        let e = enumerate_traces(&m, &[], 5, &EnumOptions::default()).unwrap();
        assert_eq!(e.traces.len(), 1);
        assert_eq!(e.traces[0].tokens, vec![15, 5, 16]);
        assert_eq!(e.traces[0].log_prob, 0.0);
    }

    #[test]
    fn uniform_binary_four_traces() {
        let m = ToyModel::uniform(2, 1, None).unwrap();
        let e = enumerate_traces(&m, &[], 2, &EnumOptions::default()).unwrap();
        assert_eq!(e.traces.len(), 4);
        for t in &e.traces {
            assert!((t.log_prob.exp() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn geometric_end_mass() {
        // V=2, end token 1 with probability 0.5 per step
        let m = ToyModel::uniform(2, 1, Some(1)).unwrap();
        let opts = EnumOptions {
            truncation: Truncation::DropUnterminated,
            ..EnumOptions::default()
        };
        let e = enumerate_traces(&m, &[], 3, &opts).unwrap();
        assert!((e.total_mass - 0.875).abs() < 1e-15);
        assert!((e.uncovered_mass - 0.125).abs() < 1e-15);
        let kept = enumerate_traces(&m, &[], 3, &EnumOptions::default()).unwrap();
        assert!((kept.total_mass - 1.0).abs() < 1e-15);
    }

    #[test]
    fn budget_guard() {
        let m = ToyModel::uniform(10, 1, None).unwrap();
        let err = enumerate_traces(&m, &[], 8, &EnumOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Resource(ref s) if s.contains("100000000")));
    }

    #[test]
    fn deterministic_correct_all_zero() {
        let m = deterministic_a5e();
        let reader = SchemeReader(ExtractionScheme::Synthetic);
        let p = problem(&m, &reader, "5", 5, AnswerLikelihood::Indicator);
        assert_eq!(marginal_answer_log_prob(&p).unwrap().value, 0.0);
        assert_eq!(jensen_lower_bound(&p).unwrap().value, 0.0);
        let report = verify_bounds(&p, &[0, 1, 2]).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.clamp_events, 0);
        for v in report.prefix_bound_by_t.values() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn quarter_marginal() {
        let m = two_branch();
        let reader = FinalTokenReader { end_token: Some(2) };
        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::Indicator);
        let v = marginal_answer_log_prob(&p).unwrap();
        assert!((v.value - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(v.clamp_events, 0);
    }

    #[test]
    fn never_emitted_answer_clamps() {
        let m = deterministic_a5e();
        let reader = SchemeReader(ExtractionScheme::Synthetic);
        let p = problem(&m, &reader, "7", 5, AnswerLikelihood::Indicator);
        let v = marginal_answer_log_prob(&p).unwrap();
        assert_eq!(v.value, LOG_CLAMP_FLOOR);
        assert_eq!(v.clamp_events, 1);
        assert!((LOG_CLAMP_FLOOR - 1e-300f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn half_half_smoothed_hand_values() {
        let mut m = ToyModel::uniform(3, 1, Some(2)).unwrap();
        m.set_logits(&[], vec![0.0, 0.0, -1000.0]).unwrap();
        m.set_logits(&[0], vec![-1000.0, -1000.0, 0.0]).unwrap();
        m.set_logits(&[1], vec![-1000.0, -1000.0, 0.0]).unwrap();
        let reader = FinalTokenReader { end_token: Some(2) };

        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::Indicator);
        let j = jensen_lower_bound(&p).unwrap();
        assert_eq!(j.clamp_events, 1);
        assert!((j.value - 0.5 * LOG_CLAMP_FLOOR).abs() < 1e-9);

        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::smoothed());
        let j = jensen_lower_bound(&p).unwrap();
        let marg = marginal_answer_log_prob(&p).unwrap();
        assert!((j.value - (0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln())).abs() < 1e-12);
        assert!((j.value - -1.2040).abs() < 1e-4);
        assert!((marg.value - 0.5f64.ln()).abs() < 1e-12);
        assert!(j.value <= marg.value);
    }

    #[test]
    fn prefix_collapses() {
        let inst = random_instance(3);
        let reader = FinalTokenReader {
            end_token: inst.model.end_token(),
        };
        let p = BoundProblem {
            model: &inst.model,
            prompt: inst.prompt.clone(),
            answer: inst.answer.clone(),
            max_len: inst.max_len,
            reader: &reader,
            likelihood: AnswerLikelihood::smoothed(),
            options: EnumOptions::default(),
        };
        let j = jensen_lower_bound(&p).unwrap().value;
        let zero = prefix_lower_bound(&p, 0).unwrap();
        assert_eq!(zero.terms.len(), 1);
        assert!(zero.terms[0].prefix.is_empty());
        assert!((zero.value - j).abs() < 1e-12);
        let full = prefix_lower_bound(&p, inst.max_len).unwrap();
        let n = enumerate_traces(&inst.model, &inst.prompt, inst.max_len, &EnumOptions::default())
            .unwrap()
            .traces
            .len();
        assert_eq!(full.terms.len(), n);
        assert!((full.value - j).abs() < 1e-12);
    }

    #[test]
    fn clamped_report_skips_equalities() {
        let m = two_branch();
        let reader = FinalTokenReader { end_token: Some(2) };
        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::Indicator);
        let report = verify_bounds(&p, &[0, 1, 2]).unwrap();
        assert!(report.clamp_events > 0);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn corrupted_report_is_caught() {
        let m = two_branch();
        let reader = FinalTokenReader { end_token: Some(2) };
        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::smoothed());
        let mut report = verify_bounds(&p, &[0, 1, 2]).unwrap();
        assert!(report.ensure_ok().is_ok());
        report.jensen_bound = report.log_p_y_given_x + 0.5;
        let v = report.check();
        assert!(v.iter().any(|v| v.invariant.starts_with("jensen_bound")));
        assert!(v.iter().any(|v| v.invariant == "prefix bound equals jensen bound"));
    }

    #[test]
    fn table_rows() {
        let m = two_branch();
        let reader = FinalTokenReader { end_token: Some(2) };
        let p = problem(&m, &reader, "0", 3, AnswerLikelihood::smoothed());
        let report = verify_bounds(&p, &[2, 0, 1, 1]).unwrap();
        let rows = report.table();
        assert_eq!(rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>(), vec![(0, 1), (1, 2), (2, 2)]);
    }
}

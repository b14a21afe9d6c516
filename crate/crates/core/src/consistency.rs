//! Prefix self-consistency analyses: how many sampled trajectories share
//! each length-`t` prefix, and how often rollouts from position `t` of a
//! correct or incorrect trajectory reach the right answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bounds::{enumerate_traces, EnumOptions, Truncation};
use crate::corpus::{is_correct, ExtractionScheme, Question, SyntheticVocab, TokenId, TraceUnit, Trajectory};
use crate::error::{Error, Result};
use crate::pipeline::parallel_map;
use crate::sampler::{count_tokens, CompletionRequest, Sampler};
use crate::seeding;
use crate::toy_model::ToyModel;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Node<U> {
    count: usize,
    terminal: usize,
    depth: usize,
    children: BTreeMap<U, usize>,
}

impl<U> Node<U> {
    fn new(depth: usize) -> Self {
        Node {
            count: 0,
            terminal: 0,
            depth,
            children: BTreeMap::new(),
        }
    }
}

/// Counting trie over trajectory units. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTrie<U: Ord = TraceUnit> {
    nodes: Vec<Node<U>>,
}

impl<U: Ord + Clone> Default for PrefixTrie<U> {
    fn default() -> Self {
        Self::new()
    }
}

impl<U: Ord + Clone> PrefixTrie<U> {
    pub fn new() -> Self {
        PrefixTrie { nodes: vec![Node::new(0)] }
    }

    /// Duplicates are retained and add to the counts.
    pub fn insert(&mut self, seq: &[U]) {
        let mut at = 0;
        self.nodes[0].count += 1;
        for (i, u) in seq.iter().enumerate() {
            let next = match self.nodes[at].children.get(u) {
                Some(&n) => n,
                None => {
                    let n = self.nodes.len();
                    self.nodes.push(Node::new(i + 1));
                    self.nodes[at].children.insert(u.clone(), n);
                    n
                }
            };
            self.nodes[next].count += 1;
            at = next;
        }
        self.nodes[at].terminal += 1;
    }

    /// Number of inserted sequences.
    pub fn len(&self) -> usize {
        self.nodes[0].count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Count of sequences passing through `prefix`; 0 if absent.
    pub fn count(&self, prefix: &[U]) -> usize {
        let mut at = 0;
        for u in prefix {
            match self.nodes[at].children.get(u) {
                Some(&n) => at = n,
                None => return 0,
            }
        }
        self.nodes[at].count
    }

    /// Every node's count equals its children's counts plus its
    /// terminations.
    pub fn is_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            let below: usize = n.children.values().map(|&c| self.nodes[c].count).sum();
            n.count == below + n.terminal
        })
    }

    /// Distinct prefixes of length `t`, counting sequences shorter than `t`
    /// as their own prefix.
    pub fn distinct_prefixes(&self, t: usize) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.depth == t || (n.depth < t && n.terminal > 0))
            .count()
    }

    /// Per-depth sums of node counts up to `max_depth`.
    pub fn depth_counts(&self, max_depth: usize) -> Vec<usize> {
        let mut out = vec![0; max_depth + 1];
        for n in &self.nodes {
            if n.depth <= max_depth {
                out[n.depth] += n.count;
            }
        }
        out
    }
}

/// Trie over the trajectories of a single question.
pub fn build_trie(trajs: &[Trajectory]) -> Result<PrefixTrie> {
    let Some(first) = trajs.first() else {
        return Err(Error::validation("cannot build a prefix trie from zero trajectories"));
    };
    if let Some(other) = trajs.iter().find(|t| t.question_id != first.question_id) {
        return Err(Error::validation(format!(
            "trajectories mix question ids {:?} and {:?}",
            first.question_id, other.question_id
        )));
    }
    let mut trie = PrefixTrie::new();
    for t in trajs {
        trie.insert(&t.units());
    }
    Ok(trie)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStat {
    pub t: usize,
    pub n_distinct_prefixes: usize,
    pub avg_traj_per_prefix: f64,
}

pub fn coverage_curve<U: Ord + Clone>(trie: &PrefixTrie<U>, t_grid: &[usize]) -> Vec<CoverageStat> {
    let n = trie.len();
    t_grid
        .iter()
        .map(|&t| {
            let d = trie.distinct_prefixes(t);
            CoverageStat {
                t,
                n_distinct_prefixes: d,
                avg_traj_per_prefix: if d == 0 { 0.0 } else { n as f64 / d as f64 },
            }
        })
        .collect()
}

pub fn coverage_csv(stats: &[CoverageStat]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "n_prefixes", "avg_per_prefix"])?;
    for s in stats {
        w.write_record([s.t.to_string(), s.n_distinct_prefixes.to_string(), s.avg_traj_per_prefix.to_string()])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Rollout settings shared by every cell of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSpec {
    pub n_rollouts: usize,
    pub temperature: f64,
    /// Cap on generated tokens per rollout.
    pub max_completion_tokens: usize,
    pub seed: u64,
    pub scheme: ExtractionScheme,
    /// Rollouts per sampler call; partial counts survive a failed chunk.
    pub chunk: usize,
    pub workers: usize,
}

impl Default for RolloutSpec {
    fn default() -> Self {
        RolloutSpec {
            n_rollouts: 32,
            temperature: 0.6,
            max_completion_tokens: 64,
            seed: 0,
            scheme: ExtractionScheme::Synthetic,
            chunk: 8,
            workers: 1,
        }
    }
}

impl RolloutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rollouts == 0 {
            return Err(Error::validation("n_rollouts must be at least 1"));
        }
        if self.chunk == 0 {
            return Err(Error::validation("rollout chunk must be at least 1"));
        }
        if self.max_completion_tokens == 0 {
            return Err(Error::validation("max_completion_tokens must be at least 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::validation("temperature must be >= 0"));
        }
        Ok(())
    }

    fn requests(&self, sampler: &dyn Sampler) -> u64 {
        let full = self.n_rollouts / self.chunk;
        let rest = self.n_rollouts % self.chunk;
        full as u64 * sampler.requests_for(self.chunk) + if rest > 0 { sampler.requests_for(rest) } else { 0 }
    }
}

/// Success count of one (trajectory, t) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutCell {
    pub t: usize,
    pub n_rollouts: usize,
    pub successes: usize,
    pub rate: f64,
    pub stderr: f64,
}

impl RolloutCell {
    fn new(t: usize, n_rollouts: usize, successes: usize) -> Self {
        let rate = successes as f64 / n_rollouts as f64;
        RolloutCell {
            t,
            n_rollouts,
            successes,
            rate,
            stderr: binomial_stderr(rate, n_rollouts),
        }
    }
}

pub fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

fn prefix_text(traj: &Trajectory, t: usize) -> Result<String> {
    if t > traj.token_count {
        return Err(Error::Precondition(format!("t = {t} exceeds trajectory length {}", traj.token_count)));
    }
    Ok(match traj.tokens() {
        Some(tokens) => SyntheticVocab.decode(&tokens[..t.min(tokens.len())]),
        None => traj.units().iter().take(t).map(|u| match u {
            TraceUnit::Word(w) => w.clone(),
            TraceUnit::Token(id) => id.to_string(),
        }).collect::<Vec<_>>().join(" "),
    })
}

/// Continues the first `t` units of `traj` `n_rollouts` times and counts
/// completions whose full text is judged correct.
pub fn rollout_success(sampler: &dyn Sampler, q: &Question, traj: &Trajectory, t: usize, spec: &RolloutSpec) -> Result<RolloutCell> {
    spec.validate()?;
    if q.reference_answer.is_none() {
        return Err(Error::Precondition(format!("question {} has no reference answer", q.id)));
    }
    let prefix = prefix_text(traj, t)?;
    // a finished trace has nothing left to roll out
    if let Some(tokens) = traj.tokens() {
        if t > 0 && tokens[t - 1] == SyntheticVocab::END {
            let done = Trajectory::from_tokens(&q.id, tokens[..t].to_vec(), spec.temperature);
            let ok = is_correct(&done, q, spec.scheme)?;
            return Ok(RolloutCell::new(t, spec.n_rollouts, if ok { spec.n_rollouts } else { 0 }));
        }
    }
    let cell_seed = seeding::derive_index(seeding::derive(spec.seed, &q.id), t as u64);
    let mut done = 0;
    let mut successes = 0;
    let mut chunk_index = 0u64;
    while done < spec.n_rollouts {
        let n = spec.chunk.min(spec.n_rollouts - done);
        let req = CompletionRequest::new(
            q.prompt_text.clone(),
            n,
            spec.max_completion_tokens,
            spec.temperature,
            seeding::derive_index(cell_seed, chunk_index),
        )
        .continuing(prefix.clone());
        let results = sampler.sample_completions(&req).map_err(|e| match e {
            Error::Transport { message, attempts, attempt_log } => Error::Transport {
                message: format!("{message} (partial: {successes}/{done} rollouts succeeded at t = {t})"),
                attempts,
                attempt_log,
            },
            other => other,
        })?;
        for r in &results {
            let full = if prefix.is_empty() { r.text.clone() } else { format!("{prefix} {}", r.text) };
            let judged = Trajectory::from_text(&q.id, full, t + count_tokens(r).count, spec.temperature);
            if is_correct(&judged, q, spec.scheme)? {
                successes += 1;
            }
        }
        done += n;
        chunk_index += 1;
    }
    Ok(RolloutCell::new(t, spec.n_rollouts, successes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub t: usize,
    pub n_rollouts: usize,
    pub success_rate_correct: f64,
    pub success_rate_incorrect: f64,
    pub stderr_correct: f64,
    pub stderr_incorrect: f64,
}

/// Rollout curves from one correct and one incorrect trajectory over
/// `t_grid`. Cells run concurrently on `spec.workers` threads.
pub fn rollout_curve(
    sampler: &dyn Sampler,
    q: &Question,
    correct: &Trajectory,
    incorrect: &Trajectory,
    t_grid: &[usize],
    spec: &RolloutSpec,
) -> Result<Vec<RolloutStats>> {
    spec.validate()?;
    sampler.preflight(2 * t_grid.len() as u64 * spec.requests(sampler))?;
    let cells: Vec<(usize, &Trajectory)> = t_grid.iter().flat_map(|&t| [(t, correct), (t, incorrect)]).collect();
    let results = parallel_map(&cells, spec.workers, |&(t, traj)| rollout_success(sampler, q, traj, t, spec));
    let mut out = Vec::with_capacity(t_grid.len());
    let mut it = results.into_iter();
    for &t in t_grid {
        let c = it.next().expect("paired cell")?;
        let i = it.next().expect("paired cell")?;
        out.push(RolloutStats {
            t,
            n_rollouts: spec.n_rollouts,
            success_rate_correct: c.rate,
            success_rate_incorrect: i.rate,
            stderr_correct: c.stderr,
            stderr_incorrect: i.stderr,
        });
    }
    Ok(out)
}

pub fn rollout_csv(stats: &[RolloutStats]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "n_rollouts", "rate_correct", "rate_incorrect", "stderr_correct", "stderr_incorrect"])?;
    for s in stats {
        w.write_record([
            s.t.to_string(),
            s.n_rollouts.to_string(),
            s.success_rate_correct.to_string(),
            s.success_rate_incorrect.to_string(),
            s.stderr_correct.to_string(),
            s.stderr_incorrect.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Probability that a continuation of `prefix` (at most
/// `max_completion_tokens` more tokens, sampled at `temperature`) yields a
/// correct answer. The prompt is `q.prompt_text` encoded with the synthetic
/// vocabulary.
pub fn exact_success_prob(
    m: &ToyModel,
    q: &Question,
    prefix: &[TokenId],
    max_completion_tokens: usize,
    scheme: ExtractionScheme,
    temperature: f64,
) -> Result<f64> {
    if q.reference_answer.is_none() {
        return Err(Error::Precondition(format!("question {} has no reference answer", q.id)));
    }
    let mut context = SyntheticVocab.encode(&q.prompt_text)?;
    context.extend_from_slice(prefix);
    if prefix.last().is_some() && prefix.last().copied() == m.end_token() {
        let traj = Trajectory::from_tokens(&q.id, prefix.to_vec(), temperature);
        return Ok(if is_correct(&traj, q, scheme)? { 1.0 } else { 0.0 });
    }
    let opts = EnumOptions {
        temperature,
        truncation: Truncation::KeepTruncated,
        ..EnumOptions::default()
    };
    let e = enumerate_traces(m, &context, max_completion_tokens, &opts)?;
    let mut p = 0.0;
    for tr in &e.traces {
        let mut full = prefix.to_vec();
        full.extend_from_slice(&tr.tokens);
        if is_correct(&Trajectory::from_tokens(&q.id, full, temperature), q, scheme)? {
            p += tr.log_prob.exp();
        }
    }
    Ok(p)
}

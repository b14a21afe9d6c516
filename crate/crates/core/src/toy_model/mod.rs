//! Order-k tabular autoregressive model over a small vocabulary.
//!
//! The logit table is conceptually dense over `(context, next)` but stored
//! sparsely: a context without a row has all-zero logits, i.e. the uniform
//! distribution. Contexts shorter than `k` are left-padded with the reserved
//! id `vocab_size`.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::seeding;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use train::{train, train_items, LrSchedule, TrainHyper, TrainReport};

pub type ContextKey = Vec<TokenId>;

#[derive(Debug, Clone)]
pub struct ToyModel {
    vocab_size: usize,
    order: usize,
    end_token: Option<TokenId>,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl PartialEq for ToyModel {
    /// Missing rows compare equal to explicit all-zero rows.
    fn eq(&self, other: &Self) -> bool {
        if self.vocab_size != other.vocab_size || self.order != other.order || self.end_token != other.end_token {
            return false;
        }
        let zeros = vec![0.0; self.vocab_size];
        let same = |a: &BTreeMap<ContextKey, Vec<f64>>, b: &BTreeMap<ContextKey, Vec<f64>>| {
            a.iter().all(|(k, row)| b.get(k).unwrap_or(&zeros) == row)
        };
        same(&self.rows, &other.rows) && same(&other.rows, &self.rows)
    }
}

/// One supervised sequence: the prompt is context only, loss is taken on
/// target positions whose mask entry is `true`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossItem {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl LossItem {
    /// Loss on every target token.
    pub fn new(prompt: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        let loss_mask = vec![true; target.len()];
        LossItem {
            prompt,
            target,
            loss_mask,
        }
    }
}

/// Sparse gradient with the same row layout as the logit table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl Gradient {
    pub fn get(&self, key: &[TokenId], next: TokenId) -> f64 {
        self.rows.get(key).map_or(0.0, |r| r[next as usize])
    }

    fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (k, row) in &other.rows {
            let dst = self.rows.entry(k.clone()).or_insert_with(|| vec![0.0; row.len()]);
            for (d, s) in dst.iter_mut().zip(row) {
                *d += scale * s;
            }
        }
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Lowest index among maximal entries.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ToyModel {
    /// All-zero logits (uniform next-token distribution everywhere).
    pub fn uniform(vocab_size: usize, order: usize, end_token: Option<TokenId>) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::validation("vocab_size must be positive"));
        }
        if order == 0 {
            return Err(Error::validation("order must be positive"));
        }
        if let Some(e) = end_token {
            if e as usize >= vocab_size {
                return Err(Error::validation(format!("end token {e} outside vocabulary of {vocab_size}")));
            }
        }
        Ok(ToyModel {
            vocab_size,
            order,
            end_token,
            rows: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }

    pub fn pad_id(&self) -> TokenId {
        self.vocab_size as TokenId
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Trailing `k` tokens of `history`, left-padded.
    pub fn context_key(&self, history: &[TokenId]) -> ContextKey {
        let k = self.order;
        let mut key = Vec::with_capacity(k);
        if history.len() < k {
            key.resize(k - history.len(), self.pad_id());
            key.extend_from_slice(history);
        } else {
            key.extend_from_slice(&history[history.len() - k..]);
        }
        key
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(t) => Err(Error::validation(format!(
                "token id {t} out of range for vocabulary of {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    pub fn logits_for_key(&self, key: &[TokenId]) -> Vec<f64> {
        self.rows
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    pub fn logits(&self, history: &[TokenId]) -> Vec<f64> {
        self.logits_for_key(&self.context_key(history))
    }

    /// Overwrites the logit row used after `history`.
    pub fn set_logits(&mut self, history: &[TokenId], logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.vocab_size {
            return Err(Error::validation(format!(
                "logit row has {} entries, vocabulary has {}",
                logits.len(),
                self.vocab_size
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::validation("logits must be finite"));
        }
        let key = self.context_key(history);
        self.rows.insert(key, logits);
        Ok(())
    }

    pub fn set_logit(&mut self, history: &[TokenId], next: TokenId, value: f64) -> Result<()> {
        self.check_tokens(&[next])?;
        let mut row = self.logits(history);
        row[next as usize] = value;
        self.set_logits(history, row)
    }

    /// Next-token log-probabilities after `history` with logits scaled by
    /// `1/temperature` (`temperature > 0`).
    pub fn log_probs(&self, history: &[TokenId], temperature: f64) -> Vec<f64> {
        let key = self.context_key(history);
        match self.rows.get(&key) {
            None => vec![-(self.vocab_size as f64).ln(); self.vocab_size],
            Some(row) if temperature == 1.0 => log_softmax(row),
            Some(row) => log_softmax(&row.iter().map(|l| l / temperature).collect::<Vec<_>>()),
        }
    }

    pub fn token_log_prob(&self, context: &[TokenId], next: TokenId) -> Result<f64> {
        self.check_tokens(context)?;
        self.check_tokens(&[next])?;
        Ok(self.log_probs(context, 1.0)[next as usize])
    }

    /// Chain-rule log-probability of `seq` after `prompt`.
    pub fn sequence_log_prob(&self, prompt: &[TokenId], seq: &[TokenId]) -> Result<f64> {
        self.check_tokens(prompt)?;
        self.check_tokens(seq)?;
        let mut history = prompt.to_vec();
        let mut total = 0.0;
        for &t in seq {
            total += self.log_probs(&history, 1.0)[t as usize];
            history.push(t);
        }
        Ok(total)
    }

    /// Draws up to `max_len` tokens, stopping after the end token.
    /// `temperature == 0` is greedy decoding.
    pub fn sample(&self, prompt: &[TokenId], temperature: f64, max_len: usize, seed: u64) -> Result<Vec<TokenId>> {
        let mut rng = seeding::rng(seed);
        self.sample_with_rng(prompt, temperature, max_len, &mut rng)
    }

    pub fn sample_with_rng<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::validation(format!("temperature must be >= 0, got {temperature}")));
        }
        if max_len == 0 {
            return Err(Error::validation("max_len must be at least 1"));
        }
        self.check_tokens(prompt)?;
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let next = if temperature == 0.0 {
                argmax(&self.logits(&history)) as TokenId
            } else {
                let probs: Vec<f64> = self.log_probs(&history, temperature).into_iter().map(f64::exp).collect();
                draw(&probs, rng.random::<f64>()) as TokenId
            };
            out.push(next);
            history.push(next);
            if Some(next) == self.end_token {
                break;
            }
        }
        Ok(out)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        self.sample(prompt, 0.0, max_len, 0)
    }

    /// Mean NLL over unmasked target tokens and its exact gradient with
    /// respect to the logits.
    pub fn nll_and_grad(&self, batch: &[LossItem]) -> Result<(f64, Gradient)> {
        let mut grad = Gradient::default();
        let mut loss = 0.0;
        let mut count = 0usize;
        for (i, item) in batch.iter().enumerate() {
            if item.loss_mask.len() != item.target.len() {
                return Err(Error::validation(format!(
                    "batch item {i}: mask length {} does not match target length {}",
                    item.loss_mask.len(),
                    item.target.len()
                )));
            }
            self.check_tokens(&item.prompt)?;
            self.check_tokens(&item.target)?;
            let mut history = item.prompt.clone();
            for (&t, &on) in item.target.iter().zip(&item.loss_mask) {
                if on {
                    let key = self.context_key(&history);
                    let logp = log_softmax(&self.logits_for_key(&key));
                    loss -= logp[t as usize];
                    count += 1;
                    let row = grad.rows.entry(key).or_insert_with(|| vec![0.0; self.vocab_size]);
                    for (g, lp) in row.iter_mut().zip(&logp) {
                        *g += lp.exp();
                    }
                    row[t as usize] -= 1.0;
                }
                history.push(t);
            }
        }
        if count == 0 {
            return Err(Error::validation("batch has no unmasked target tokens"));
        }
        let scale = 1.0 / count as f64;
        for row in grad.rows.values_mut() {
            row.iter_mut().for_each(|g| *g *= scale);
        }
        Ok((loss * scale, grad))
    }

    /// `logits -= learning_rate * grad`.
    pub fn apply_gradient(&mut self, grad: &Gradient, learning_rate: f64) {
        if learning_rate == 0.0 {
            return;
        }
        for (key, g) in &grad.rows {
            let row = self
                .rows
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; self.vocab_size]);
            for (l, gi) in row.iter_mut().zip(g) {
                *l -= learning_rate * gi;
            }
        }
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        order: usize,
        end_token: Option<TokenId>,
        rows: BTreeMap<ContextKey, Vec<f64>>,
    ) -> Self {
        ToyModel {
            vocab_size,
            order,
            end_token,
            rows,
        }
    }
}

/// Inverse-CDF draw from a probability vector with `u` in `[0, 1)`.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Question;
use crate::error::{Error, Result};

/// Parameters of the step-wise modular arithmetic task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_questions: usize,
    pub n_steps: usize,
    #[serde(default = "default_modulus")]
    pub modulus: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
}

fn default_modulus() -> u32 {
    10
}

fn default_id_prefix() -> String {
    "q".to_string()
}

impl SyntheticTaskSpec {
    pub fn new(n_questions: usize, n_steps: usize, modulus: u32, seed: u64) -> Self {
        SyntheticTaskSpec {
            n_questions,
            n_steps,
            modulus,
            seed,
            id_prefix: default_id_prefix(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_questions == 0 {
            return Err(Error::validation("n_questions must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::validation("n_steps must be positive"));
        }
        // operands and results must stay single-digit tokens
        if !(1..=10).contains(&self.modulus) {
            return Err(Error::validation(format!(
                "modulus must be in 1..=10, got {}",
                self.modulus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainOp {
    Add,
    Sub,
}

impl ChainOp {
    fn symbol(self) -> char {
        match self {
            ChainOp::Add => '+',
            ChainOp::Sub => '-',
        }
    }

    fn apply(self, acc: u32, operand: u32, modulus: u32) -> u32 {
        let m = i64::from(modulus);
        let v = match self {
            ChainOp::Add => i64::from(acc) + i64::from(operand),
            ChainOp::Sub => i64::from(acc) - i64::from(operand),
        };
        v.rem_euclid(m) as u32
    }
}

/// Generates `n_questions` questions of the form `a1+a2-a3=?`.
///
/// Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<Question>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_questions.saturating_sub(1).to_string().len().max(5);
    let mut out = Vec::with_capacity(spec.n_questions);
    for i in 0..spec.n_questions {
        let mut operands = Vec::with_capacity(spec.n_steps + 1);
        let mut ops = Vec::with_capacity(spec.n_steps);
        operands.push(rng.random_range(0..spec.modulus));
        for _ in 0..spec.n_steps {
            ops.push(if rng.random_bool(0.5) { ChainOp::Add } else { ChainOp::Sub });
            operands.push(rng.random_range(0..spec.modulus));
        }
        let mut prompt = operands[0].to_string();
        for (op, a) in ops.iter().zip(&operands[1..]) {
            prompt.push(op.symbol());
            write!(prompt, "{a}").unwrap();
        }
        prompt.push_str("=?");
        let answer = evaluate_chain(&operands, &ops, spec.modulus);
        let mut meta = BTreeMap::new();
        meta.insert("source".to_string(), "synthetic".to_string());
        meta.insert("difficulty".to_string(), format!("steps-{}", spec.n_steps));
        meta.insert("modulus".to_string(), spec.modulus.to_string());
        out.push(Question {
            id: format!("{}{:0width$}", spec.id_prefix, i),
            prompt_text: prompt,
            reference_answer: Some(answer.to_string()),
            meta,
        });
    }
    Ok(out)
}

/// Left-to-right evaluation, reducing mod `modulus` after every step.
pub fn evaluate_chain(operands: &[u32], ops: &[ChainOp], modulus: u32) -> u32 {
    let mut acc = operands[0] % modulus;
    for (op, &a) in ops.iter().zip(&operands[1..]) {
        acc = op.apply(acc, a, modulus);
    }
    acc
}

/// Parses a synthetic prompt such as `3+4-2=?` into operands and operators.
pub fn parse_chain(prompt: &str) -> Option<(Vec<u32>, Vec<ChainOp>)> {
    let body = prompt.trim().strip_suffix("=?")?;
    let mut operands = Vec::new();
    let mut ops = Vec::new();
    for (i, c) in body.chars().enumerate() {
        if i % 2 == 0 {
            operands.push(c.to_digit(10)?);
        } else {
            ops.push(match c {
                '+' => ChainOp::Add,
                '-' | '−' => ChainOp::Sub,
                _ => return None,
            });
        }
    }
    (operands.len() == ops.len() + 1).then_some((operands, ops))
}

/// Canonical step-by-step derivation, e.g. `3 + 4 = 7 ; 7 - 2 = 5 ; A 5 E`.
///
/// Documentation and golden files only; the modulus is read from the
/// question's `meta` (default 10).
pub fn reference_trace(q: &Question) -> Option<String> {
    let modulus = q
        .meta
        .get("modulus")
        .and_then(|m| m.parse().ok())
        .unwrap_or(10);
    let (operands, ops) = parse_chain(&q.prompt_text)?;
    let mut acc = operands[0] % modulus;
    let mut out = String::new();
    for (op, &a) in ops.iter().zip(&operands[1..]) {
        let next = op.apply(acc, a, modulus);
        write!(out, "{acc} {} {a} = {next} ; ", op.symbol()).unwrap();
        acc = next;
    }
    write!(out, "A {acc} E").unwrap();
    Some(out)
}

//! Questions, sampled trajectories, answer extraction and the synthetic
//! arithmetic task.

mod extract;
mod synthetic;
mod vocab;

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use extract::{extract_answer, extract_answer_text, is_correct, normalize_answer, ExtractionScheme};
pub use synthetic::{evaluate_chain, generate_synthetic, parse_chain, reference_trace, ChainOp, SyntheticTaskSpec};
pub use vocab::{SyntheticVocab, TokenId};

/// An input `x` with an optional ground-truth answer `y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(rename = "answer", default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Question {
    pub fn new(id: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Question {
            id: id.into(),
            prompt_text: prompt_text.into(),
            reference_answer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_answer(mut self, answer: impl Into<String>) -> Self {
        self.reference_answer = Some(answer.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("question id must be non-empty"));
        }
        if self.prompt_text.trim().is_empty() {
            return Err(Error::validation(format!(
                "question {} has an empty prompt",
                self.id
            )));
        }
        Ok(())
    }
}

/// Checks per-question invariants plus id uniqueness across the corpus.
pub fn validate_corpus(questions: &[Question]) -> Result<()> {
    let mut seen = HashSet::with_capacity(questions.len());
    for q in questions {
        q.validate()?;
        if !seen.insert(q.id.as_str()) {
            return Err(Error::validation(format!("duplicate question id {}", q.id)));
        }
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Question>> {
    let questions: Vec<Question> = jsonl::read(path)?;
    validate_corpus(&questions)?;
    Ok(questions)
}

pub fn write_corpus(path: &Path, questions: &[Question]) -> Result<()> {
    jsonl::write(path, questions)
}

/// Payload of a trajectory: token ids from the toy model or raw text from a
/// remote sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceBody {
    Tokens(Vec<TokenId>),
    Text(String),
}

/// Unit of prefix analysis: a sampler-native token, or a whitespace word
/// when only text is available.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TraceUnit {
    Token(TokenId),
    Word(String),
}

/// A reasoning trace `r` sampled for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: String,
    pub body: TraceBody,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub sampling_temperature: f64,
}

impl Trajectory {
    pub fn from_tokens(question_id: impl Into<String>, tokens: Vec<TokenId>, temperature: f64) -> Self {
        let token_count = tokens.len();
        Trajectory {
            question_id: question_id.into(),
            body: TraceBody::Tokens(tokens),
            token_count,
            extracted_answer: None,
            correct: None,
            sampling_temperature: temperature,
        }
    }

    /// `token_count` is the sampler-reported count.
    pub fn from_text(
        question_id: impl Into<String>,
        text: impl Into<String>,
        token_count: usize,
        temperature: f64,
    ) -> Self {
        Trajectory {
            question_id: question_id.into(),
            body: TraceBody::Text(text.into()),
            token_count,
            extracted_answer: None,
            correct: None,
            sampling_temperature: temperature,
        }
    }

    pub fn tokens(&self) -> Option<&[TokenId]> {
        match &self.body {
            TraceBody::Tokens(t) => Some(t),
            TraceBody::Text(_) => None,
        }
    }

    /// Text view; token bodies are rendered with the synthetic vocabulary.
    pub fn text(&self) -> Cow<'_, str> {
        match &self.body {
            TraceBody::Text(s) => Cow::Borrowed(s),
            TraceBody::Tokens(t) => Cow::Owned(SyntheticVocab.decode(t)),
        }
    }

    pub fn is_empty(&self) -> bool {
        match &self.body {
            TraceBody::Tokens(t) => t.is_empty(),
            TraceBody::Text(s) => s.is_empty(),
        }
    }

    pub fn units(&self) -> Vec<TraceUnit> {
        match &self.body {
            TraceBody::Tokens(t) => t.iter().copied().map(TraceUnit::Token).collect(),
            TraceBody::Text(s) => s
                .split_whitespace()
                .map(|w| TraceUnit::Word(w.to_string()))
                .collect(),
        }
    }

    /// Fills `extracted_answer`, and `correct` when the question carries a
    /// reference answer.
    pub fn annotate(&mut self, question: &Question, scheme: ExtractionScheme) {
        self.extracted_answer = extract_answer(self, scheme);
        self.correct = question
            .reference_answer
            .as_ref()
            .map(|_| is_correct(self, question, scheme).unwrap_or(false));
    }
}

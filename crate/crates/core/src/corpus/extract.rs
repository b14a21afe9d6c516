use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Question, Trajectory};
use crate::error::{Error, Result};

/// How a final answer is read out of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionScheme {
    /// Digits following the last answer marker (`A` or `ANS`).
    #[default]
    Synthetic,
    /// Last numeric literal in the text.
    LastNumber,
    /// Content of the last `\boxed{...}`.
    Boxed,
}

impl FromStr for ExtractionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "last-number" => Ok(Self::LastNumber),
            "boxed" => Ok(Self::Boxed),
            other => Err(Error::validation(format!("unknown extraction scheme {other:?}"))),
        }
    }
}

impl fmt::Display for ExtractionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::LastNumber => "last-number",
            Self::Boxed => "boxed",
        })
    }
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:ANS|A)\s*(-?\d(?:[ \t]*\d)*)").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").unwrap())
}

pub fn extract_answer(traj: &Trajectory, scheme: ExtractionScheme) -> Option<String> {
    extract_answer_text(&traj.text(), scheme)
}

pub fn extract_answer_text(text: &str, scheme: ExtractionScheme) -> Option<String> {
    match scheme {
        ExtractionScheme::Synthetic => marker_re()
            .captures_iter(text)
            .last()
            .map(|c| c[1].chars().filter(|c| !c.is_whitespace()).collect()),
        ExtractionScheme::LastNumber => number_re().find_iter(text).last().map(|m| m.as_str().to_string()),
        ExtractionScheme::Boxed => last_boxed(text),
    }
}

fn last_boxed(text: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].trim().to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Trims, and for integer literals drops a leading `+` and leading zeros.
pub fn normalize_answer(s: &str) -> String {
    let s = s.trim();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return s.to_string();
    }
    let stripped = digits.trim_start_matches('0');
    match (neg, stripped.is_empty()) {
        (_, true) => "0".to_string(),
        (true, false) => format!("-{stripped}"),
        (false, false) => stripped.to_string(),
    }
}

/// True iff an answer is extracted and equals the reference after
/// normalization.
pub fn is_correct(traj: &Trajectory, q: &Question, scheme: ExtractionScheme) -> Result<bool> {
    let reference = q
        .reference_answer
        .as_deref()
        .ok_or_else(|| Error::Precondition(format!("question {} has no reference answer", q.id)))?;
    Ok(extract_answer(traj, scheme).is_some_and(|a| normalize_answer(&a) == normalize_answer(reference)))
}

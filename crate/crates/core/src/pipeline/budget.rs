use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};

/// Tokens generated while building a dataset and tokens trained on in one
/// pass over it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub sampling_tokens: u64,
    pub tuning_tokens: u64,
    /// Set when any count fell back to a whitespace estimate.
    #[serde(default)]
    pub approximate: bool,
}

impl Add for TokenBudget {
    type Output = TokenBudget;

    fn add(self, rhs: TokenBudget) -> TokenBudget {
        TokenBudget {
            sampling_tokens: self.sampling_tokens + rhs.sampling_tokens,
            tuning_tokens: self.tuning_tokens + rhs.tuning_tokens,
            approximate: self.approximate || rhs.approximate,
        }
    }
}

impl AddAssign for TokenBudget {
    fn add_assign(&mut self, rhs: TokenBudget) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenBudget {
    fn sum<I: Iterator<Item = TokenBudget>>(iter: I) -> TokenBudget {
        iter.fold(TokenBudget::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub method: Method,
    pub sampling_tokens: u64,
    pub tuning_tokens: u64,
    pub approximate: bool,
    pub sampling_ratio_vs_rft: Option<f64>,
    pub tuning_ratio_vs_rft: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetTable {
    pub rows: Vec<BudgetRow>,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Per-method budgets with ratios against the first RFT row (absent when
/// no RFT row is given).
pub fn budget_report(budgets: &[(Method, TokenBudget)]) -> Result<BudgetTable> {
    if budgets.is_empty() {
        return Err(Error::validation("budget report needs at least one budget"));
    }
    let rft = budgets.iter().find(|(m, _)| *m == Method::Rft).map(|(_, b)| *b);
    let rows = budgets
        .iter()
        .map(|(method, b)| BudgetRow {
            method: *method,
            sampling_tokens: b.sampling_tokens,
            tuning_tokens: b.tuning_tokens,
            approximate: b.approximate,
            sampling_ratio_vs_rft: rft.and_then(|r| ratio(b.sampling_tokens, r.sampling_tokens)),
            tuning_ratio_vs_rft: rft.and_then(|r| ratio(b.tuning_tokens, r.tuning_tokens)),
        })
        .collect();
    Ok(BudgetTable { rows })
}

impl BudgetTable {
    pub fn render(&self) -> String {
        let fmt_ratio = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |r| format!("{:.4}%", 100.0 * r));
        let mut out = format!(
            "{:<22} {:>14} {:>14} {:>14} {:>14}\n",
            "method", "sampling", "tuning", "sampling/RFT", "tuning/RFT"
        );
        for r in &self.rows {
            let approx = if r.approximate { "~" } else { "" };
            writeln!(
                out,
                "{:<22} {:>14} {:>14} {:>14} {:>14}",
                r.method.to_string(),
                format!("{approx}{}", r.sampling_tokens),
                format!("{approx}{}", r.tuning_tokens),
                fmt_ratio(r.sampling_ratio_vs_rft),
                fmt_ratio(r.tuning_ratio_vs_rft)
            )
            .unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "sampling_tokens", "tuning_tokens", "approximate", "sampling_ratio_vs_rft", "tuning_ratio_vs_rft"])?;
        let opt = |r: Option<f64>| r.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.to_string(),
                r.sampling_tokens.to_string(),
                r.tuning_tokens.to_string(),
                r.approximate.to_string(),
                opt(r.sampling_ratio_vs_rft),
                opt(r.tuning_ratio_vs_rft),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

//! JSON checkpoint layout:
//!
//! ```json
//! {
//!   "format": "upft-toy-model",
//!   "version": 1,
//!   "vocab_size": 18,
//!   "order": 5,
//!   "end_token": 16,
//!   "rows": [ { "context": [18, 18, 3, 10, 4], "logits": [0.0, ...] } ]
//! }
//! ```
//!
//! `context` holds exactly `order` ids, where `vocab_size` is the pad id.
//! Rows are sorted by context; absent rows mean all-zero logits. Floats are
//! written in shortest round-trip form so `load(save(m))` is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ToyModel;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "upft-toy-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Row {
    context: Vec<TokenId>,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    vocab_size: usize,
    order: usize,
    #[serde(default)]
    end_token: Option<TokenId>,
    rows: Vec<Row>,
}

impl ToyModel {
    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: VERSION,
            vocab_size: self.vocab_size,
            order: self.order,
            end_token: self.end_token,
            rows: self
                .rows
                .iter()
                .map(|(k, v)| Row {
                    context: k.clone(),
                    logits: v.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let base = ToyModel::uniform(ck.vocab_size, ck.order, ck.end_token)?;
        let mut rows = BTreeMap::new();
        for row in ck.rows {
            if row.context.len() != ck.order {
                return Err(Error::validation(format!(
                    "context {:?} does not have order {}",
                    row.context, ck.order
                )));
            }
            if row.context.iter().any(|&t| t as usize > ck.vocab_size) {
                return Err(Error::validation(format!("context {:?} has out-of-range ids", row.context)));
            }
            if row.logits.len() != ck.vocab_size || row.logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::validation(format!("bad logit row for context {:?}", row.context)));
            }
            if rows.insert(row.context.clone(), row.logits).is_some() {
                return Err(Error::validation(format!("duplicate context {:?}", row.context)));
            }
        }
        Ok(ToyModel::from_parts(base.vocab_size, base.order, base.end_token, rows))
    }
}

pub fn save_checkpoint(model: &ToyModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ToyModel::from_json(&s)
}

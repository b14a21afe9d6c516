//! Toolkit for unsupervised prefix fine-tuning experiments.
//!
//! * [`corpus`]: questions, trajectories, answer extraction, synthetic task
//! * [`toy_model`]: enumerable order-k tabular autoregressive model
//! * [`bounds`]: exact answer likelihood, Jensen bound and its prefix form
//! * [`consistency`]: prefix coverage and rollout success analyses
//! * [`sampler`]: toy and chat-completions sampling backends
//! * [`pipeline`]: UPFT / SFT / RFT dataset builders and token budgets
//! * [`experiment`]: desk-scale method comparison

pub mod bounds;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod jsonl;
pub mod pipeline;
pub mod sampler;
pub mod seeding;
pub mod toy_model;

pub use error::{Error, ErrorClass, Result};

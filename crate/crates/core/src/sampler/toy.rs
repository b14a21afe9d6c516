use std::sync::Arc;
use std::time::Instant;

use super::{CompletionRequest, FinishReason, SampleResult, Sampler, SamplerIdentity, Backend};
use crate::corpus::SyntheticVocab;
use crate::error::Result;
use crate::seeding;
use crate::toy_model::ToyModel;

/// In-process sampler backed by a [`ToyModel`] over the synthetic
/// vocabulary. Completion `i` of a request uses seed
/// `derive_index(req.seed, i)`, so results are exactly reproducible.
#[derive(Debug, Clone)]
pub struct ToySampler {
    model: Arc<ToyModel>,
    label: String,
}

impl ToySampler {
    pub fn new(model: ToyModel) -> Self {
        Self::shared(Arc::new(model))
    }

    pub fn shared(model: Arc<ToyModel>) -> Self {
        ToySampler {
            model,
            label: "toy".to_string(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

impl Sampler for ToySampler {
    fn sample_completions(&self, req: &CompletionRequest) -> Result<Vec<SampleResult>> {
        let vocab = SyntheticVocab;
        let mut context = vocab.encode(&req.prompt)?;
        context.extend(vocab.encode(&req.response_prefix)?);
        let mut out = Vec::with_capacity(req.n);
        for i in 0..req.n {
            let start = Instant::now();
            let seed = seeding::derive_index(req.seed, i as u64);
            let tokens = self.model.sample(&context, req.temperature, req.max_tokens, seed)?;
            let finish = if tokens.last().copied() == self.model.end_token() {
                FinishReason::Stop
            } else {
                FinishReason::Length
            };
            let text = vocab.decode(&tokens);
            let mut r = SampleResult::from_tokens(tokens, text, finish);
            r.latency = start.elapsed();
            out.push(r);
        }
        Ok(out)
    }

    fn identity(&self) -> SamplerIdentity {
        SamplerIdentity {
            backend: Backend::Toy,
            model: self.label.clone(),
            reproducible: true,
        }
    }
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Gradient, LossItem, ToyModel};
use crate::corpus::SyntheticVocab;
use crate::error::{Error, Result};
use crate::pipeline::TrainingExample;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear ramp over the warmup steps, constant afterwards.
    #[default]
    ConstantWithWarmup,
}

/// SGD hyperparameters. Warmup ratio, schedule, batch size and
/// accumulation default to the values used for the 7B runs; learning rate
/// and epochs are toy-scale choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_length: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1.0,
            warmup_ratio: 0.03,
            schedule: LrSchedule::ConstantWithWarmup,
            epochs: 2,
            batch_size: 1,
            grad_accum_steps: 8,
            max_length: 64,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::validation("warmup_ratio must be in [0, 1]"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("max_length", self.max_length),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, n_items: usize) -> usize {
        let micro = n_items.div_ceil(self.batch_size);
        self.epochs * micro.div_ceil(self.grad_accum_steps)
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).ceil() as usize
    }

    /// Learning rate of optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize, warmup_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::ConstantWithWarmup if step < warmup_steps => {
                self.learning_rate * (step + 1) as f64 / warmup_steps as f64
            }
            LrSchedule::ConstantWithWarmup => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ToyModel,
    /// Mean micro-batch loss of each optimizer step.
    pub step_losses: Vec<f64>,
    pub skipped_examples: Vec<String>,
}

/// Tokenizes examples with the synthetic vocabulary and trains on target
/// tokens only.
pub fn train(model: &ToyModel, examples: &[TrainingExample], h: &TrainHyper) -> Result<TrainReport> {
    let vocab = SyntheticVocab;
    let mut items = Vec::with_capacity(examples.len());
    let mut skipped = Vec::new();
    for ex in examples {
        let data_err = |message: String| Error::Data {
            item: format!("training example for question {}", ex.question_id),
            message,
        };
        let prompt = vocab.encode(&ex.prompt).map_err(|e| data_err(e.to_string()))?;
        let target = vocab.encode(&ex.target).map_err(|e| data_err(e.to_string()))?;
        model
            .check_tokens(&prompt)
            .and_then(|_| model.check_tokens(&target))
            .map_err(|e| data_err(e.to_string()))?;
        let keep = h.max_length.saturating_sub(prompt.len()).min(target.len());
        if keep == 0 {
            skipped.push(ex.question_id.clone());
            continue;
        }
        items.push(LossItem::new(prompt, target[..keep].to_vec()));
    }
    let mut report = train_items(model, &items, h)?;
    report.skipped_examples = skipped;
    Ok(report)
}

/// SGD over pre-tokenized items: per-epoch seeded shuffle, micro-batches of
/// `batch_size`, one update per `grad_accum_steps` micro-batches.
pub fn train_items(model: &ToyModel, items: &[LossItem], h: &TrainHyper) -> Result<TrainReport> {
    h.validate()?;
    let mut model = model.clone();
    let total = h.total_steps(items.len());
    let warmup = h.warmup_steps(total);
    let mut step = 0usize;
    let mut step_losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..h.epochs {
        let mut rng = seeding::rng(seeding::derive_index(h.seed, epoch as u64));
        order.shuffle(&mut rng);
        let micro: Vec<&[usize]> = order.chunks(h.batch_size).collect();
        for group in micro.chunks(h.grad_accum_steps) {
            let mut acc = Gradient::default();
            let mut loss_sum = 0.0;
            let mut n = 0usize;
            for mb in group {
                let batch: Vec<LossItem> = mb.iter().map(|&i| items[i].clone()).collect();
                let (loss, grad) = match model.nll_and_grad(&batch) {
                    Ok(v) => v,
                    // all-masked micro-batch: nothing to learn from it
                    Err(Error::Validation(_)) if batch.iter().all(|b| !b.loss_mask.contains(&true)) => continue,
                    Err(e) => return Err(e),
                };
                acc.add_scaled(&grad, 1.0);
                loss_sum += loss;
                n += 1;
            }
            if n > 0 {
                let lr = h.lr_at(step, warmup);
                let scale = 1.0 / n as f64;
                acc.rows.values_mut().for_each(|r| r.iter_mut().for_each(|g| *g *= scale));
                model.apply_gradient(&acc, lr);
                let mean = loss_sum * scale;
                log::debug!("step {step} lr {lr:.4e} loss {mean:.6}");
                step_losses.push(mean);
            }
            step += 1;
        }
    }
    Ok(TrainReport {
        model,
        step_losses,
        skipped_examples: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items() -> Vec<LossItem> {
        vec![
            LossItem::new(vec![0, 1], vec![2, 3]),
            LossItem::new(vec![1], vec![3, 3, 0]),
            LossItem::new(vec![2, 2], vec![1]),
        ]
    }

    #[test]
    fn zero_lr_is_identity() {
        let m = ToyModel::uniform(4, 2, None).unwrap();
        let h = TrainHyper {
            learning_rate: 0.0,
            ..TrainHyper::default()
        };
        let out = train_items(&m, &items(), &h).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.model.n_rows(), 0);
    }

    #[test]
    fn one_step_descends() {
        let m = ToyModel::uniform(4, 2, None).unwrap();
        let item = LossItem::new(vec![0, 1], vec![2, 3, 1]);
        let h = TrainHyper {
            learning_rate: 1e-2,
            epochs: 1,
            grad_accum_steps: 1,
            ..TrainHyper::default()
        };
        let before = m.nll_and_grad(std::slice::from_ref(&item)).unwrap().0;
        let out = train_items(&m, std::slice::from_ref(&item), &h).unwrap();
        let after = out.model.nll_and_grad(&[item]).unwrap().0;
        assert_eq!(out.step_losses.len(), 1);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn deterministic() {
        let m = ToyModel::uniform(4, 2, None).unwrap();
        let h = TrainHyper {
            learning_rate: 0.5,
            epochs: 3,
            grad_accum_steps: 2,
            seed: 9,
            ..TrainHyper::default()
        };
        let a = train_items(&m, &items(), &h).unwrap().model;
        let b = train_items(&m, &items(), &h).unwrap().model;
        let bits = |m: &ToyModel| {
            m.rows()
                .map(|(k, r)| (k.clone(), r.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn warmup_schedule() {
        let h = TrainHyper {
            learning_rate: 1.0,
            warmup_ratio: 0.25,
            ..TrainHyper::default()
        };
        let w = h.warmup_steps(8);
        assert_eq!(w, 2);
        assert_eq!(h.lr_at(0, w), 0.5);
        assert_eq!(h.lr_at(1, w), 1.0);
        assert_eq!(h.lr_at(7, w), 1.0);
        assert_eq!(h.lr_at(0, 0), 1.0);
    }

    #[test]
    fn step_count() {
        let h = TrainHyper {
            epochs: 2,
            batch_size: 2,
            grad_accum_steps: 3,
            ..TrainHyper::default()
        };
        // 13 items -> 7 micro-batches -> 3 updates per epoch
        assert_eq!(h.total_steps(13), 6);
    }

    #[test]
    fn invalid_hyper() {
        let m = ToyModel::uniform(4, 2, None).unwrap();
        for h in [
            TrainHyper { epochs: 0, ..TrainHyper::default() },
            TrainHyper { warmup_ratio: 1.5, ..TrainHyper::default() },
            TrainHyper { learning_rate: -1.0, ..TrainHyper::default() },
        ] {
            assert!(train_items(&m, &items(), &h).is_err());
        }
    }
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::assemble::AssembledSequence;
use super::forward::accumulate_gradients;
use super::params::ModelParams;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::seed::{child_rng, streams};

/// Loss above this (or non-finite) aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Linear warmup steps before the linear decay.
    pub warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            precision: Precision::Single,
            grad_clip: None,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n` sequences.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    /// Learning rate at 0-based `step`: optional linear warmup, then linear decay to 0.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let w = self.warmup_steps.min(total);
        if step < w {
            return self.learning_rate * (step + 1) as f64 / w as f64;
        }
        let span = (total - w).max(1) as f64;
        self.learning_rate * (1.0 - (step - w) as f64 / span)
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Mean batch loss at every step.
    pub loss_trace: Vec<f64>,
    pub optimizer: AdamState<T>,
    pub steps: usize,
}

/// AdamW with decoupled decay on matrix blocks, linear learning-rate decay
/// and per-epoch seeded shuffling.
pub fn train<T: Scalar>(
    mut params: ModelParams<T>,
    dataset: &[AssembledSequence<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInstance("training set is empty".into()));
    }
    let n = params.data.len();
    let decay_mask: Vec<bool> = {
        let mut mask = vec![false; n];
        for b in params.blocks() {
            if b.decay {
                mask[b.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    };
    let total = config.total_steps(dataset.len());
    let mut opt = AdamState::<T>::new(n);
    let mut grad = vec![T::zero(); n];
    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    let log_every = (total / 20).max(1);

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut child_rng(config.seed, streams::SHUFFLE, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let step = trace.len();
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &dataset[i]));
            grad.iter_mut().for_each(|g| *g = T::zero());
            let loss = accumulate_gradients(&params, &batch, &mut grad).map_err(|e| match e {
                Error::NumericFailure(msg) => {
                    log::warn!("step {step}: non-finite {msg}");
                    Error::TrainingFailure { step, loss: f64::NAN }
                }
                other => other,
            })?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::TrainingFailure { step, loss });
            }
            trace.push(loss);
            if let Some(clip) = config.grad_clip {
                let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
                if norm > clip {
                    let s = T::of(clip / norm);
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adamw_step(&mut params.data, &grad, &decay_mask, &mut opt, config, config.lr_at(step, total));
            if step % log_every == 0 || step + 1 == total {
                log::info!("step {}/{} epoch {} loss {:.4}", step + 1, total, epoch, loss);
            }
        }
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
        optimizer: opt,
        steps: total,
    })
}

fn adamw_step<T: Scalar>(
    data: &mut [T],
    grad: &[T],
    decay: &[bool],
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, wd, eps) = (T::of(lr), T::of(cfg.weight_decay), T::of(cfg.eps));
    let one = T::one();
    for i in 0..data.len() {
        let g = grad[i];
        opt.m[i] = b1 * opt.m[i] + (one - b1) * g;
        opt.v[i] = b2 * opt.v[i] + (one - b2) * g * g;
        let mut update = (opt.m[i] * c1) / ((opt.v[i] * c2).sqrt() + eps);
        if decay[i] {
            update += wd * data[i];
        }
        data[i] -= lr * update;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_linearly_to_zero() {
        let c = TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0, 4), 1.0);
        assert_eq!(c.lr_at(2, 4), 0.5);
        assert_eq!(c.lr_at(3, 4), 0.25);
        let w = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        assert_eq!(w.lr_at(0, 6), 0.5);
        assert_eq!(w.lr_at(1, 6), 1.0);
        assert_eq!(w.lr_at(2, 6), 1.0);
        assert_eq!(w.lr_at(4, 6), 0.5);
    }

    #[test]
    fn steps_round_partial_batches_up() {
        let c = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(c.total_steps(9), 9);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().is_config_error());
        let c = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Adam, the step-decay schedule, inverted dropout and the base-class training loop.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::FrameSequence;
use crate::error::{CltaError, Result};
use crate::numerics::{GradientBundle, Matrix};
use crate::model::Model;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    ///
    /// All gradients are checked before anything is modified, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: Vec<(&'static str, &mut Matrix)>, grads: &GradientBundle, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CltaError::config(format!("learning rate must be positive, got {lr}")));
        }
        for (name, p) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| CltaError::Training(format!("no gradient for parameter `{name}`")))?;
            if !g.same_shape(p) {
                return Err(CltaError::shape(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(CltaError::Training(format!("non-finite gradient for parameter `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in params {
            let g = grads.get(name).expect("checked above");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            for (((pi, gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(
    params: Vec<(&'static str, &mut Matrix)>,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings used at the original scale (batch 128).
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(CltaError::config("lr0 must be positive"));
        }
        if self.decay_every == 0 {
            return Err(CltaError::config("decay_every must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(CltaError::config("decay_factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(CltaError::config("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CltaError::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_every: 5,
            decay_factor: 0.5,
            batch_size: 32,
            epochs: 20,
            dropout_rate: 0.9,
            seed: 0,
        }
    }
}

pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn dropout_apply<R: Rng>(x: &[f64], rate: f64, rng: &mut R, training: bool) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(CltaError::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    Ok(x.iter().zip(mask).map(|(v, m)| v * m).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Missing when there is no validation split.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Scores a model on held-out data; higher is better.
pub type Validator<'a> = dyn Fn(&Model) -> Result<f64> + Sync + 'a;

/// Trains `model` on labelled sequences.
///
/// Each epoch shuffles the data with a generator seeded from `cfg.seed`, which
/// also supplies the dropout masks. When `validate` is given, the parameters of
/// the epoch with the highest score are returned (earliest on ties); otherwise
/// the last epoch's parameters are kept.
pub fn train(
    mut model: Model,
    data: &[FrameSequence],
    cfg: &TrainConfig,
    validate: Option<&Validator<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CltaError::config("training set is empty"));
    }
    let labels: Vec<usize> = data
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| CltaError::config(format!("training video `{}` has no label", s.video_id)))
        })
        .collect::<Result<_>>()?;
    if validate.is_none() {
        warn!("no validation split, keeping the parameters of the last epoch");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            // Same-length videos sit next to each other; there is no padding.
            let mut idx = chunk.to_vec();
            idx.sort_by_key(|&i| (data[i].len(), i));
            let batch: Vec<&FrameSequence> = idx.iter().map(|&i| &data[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let res = model.batch_loss_grad(&batch, &ys, Some((&mut rng, cfg.dropout_rate)))?;
            if !res.grads.loss.is_finite() {
                return Err(CltaError::Training(format!("loss became {} in epoch {epoch}", res.grads.loss)));
            }
            loss_sum += res.grads.loss * batch.len() as f64;
            correct += res.correct;
            adam.step(model.params_mut(), &res.grads, lr)?;
            if let Some(stats) = &res.stats {
                model.update_running_stats(stats);
            }
        }
        let val_acc = validate.map(|f| f(&model)).transpose()?;
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            val_acc,
        };
        info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} train acc {:.3} val acc {}",
            entry.train_loss,
            entry.train_acc,
            val_acc.map_or("-".to_string(), |v| format!("{v:.3}"))
        );
        log.push(entry);
        if let Some(v) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, model.clone()));
            }
        }
    }

    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs.saturating_sub(1), model),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

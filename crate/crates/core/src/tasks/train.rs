// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch AdamW on the cross-entropy of the last-token logits, with
//! early stopping on a held-out split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lrp::RuleConfig;
use crate::model::{argmax, MambaModel, MambaParams};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::tasks::data::Example;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Share of the data held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 20,
            patience: 3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            val_fraction: 0.1,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam moment coefficients must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("Adam epsilon and clip norm must be > 0, weight decay >= 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest held-out loss.
    pub model: MambaModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn check_labels(model: &MambaModel, data: &[Example]) -> Result<()> {
    let classes = model.config().num_classes;
    match data.iter().find(|e| e.label >= classes) {
        Some(e) => Err(Error::Config(format!("label {} but the model has {classes} classes", e.label))),
        None => Ok(()),
    }
}

fn nll(logits: &[f64], label: usize) -> f64 {
    crate::autodiff::log_sum_exp(logits) - logits[label]
}

/// Loss and parameter gradients for one example, in flatten order.
fn example_gradient(model: &MambaModel, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape);
    let embedded = tape.gather_rows(params.embedding, &ex.tokens)?;
    let vars = crate::model::forward(&mut tape, &params, embedded, &RuleConfig::plain())?;
    let loss = tape.cross_entropy(vars.logits, ex.label)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item()?;
    Ok((value, params.flatten().into_iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mean cross-entropy and accuracy over `data`.
pub fn evaluate(model: &MambaModel, data: &[Example], exec: Execution) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    check_labels(model, data)?;
    let per = par::try_map_indexed(data.len(), exec, |i| {
        let logits = model.classify(&data[i].tokens)?;
        Ok((nll(logits.data(), data[i].label), argmax(logits.data()) == data[i].label))
    })?;
    let n = data.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Fraction of examples whose arg-max prediction equals the label.
pub fn evaluate_accuracy(model: &MambaModel, data: &[Example], exec: Execution) -> Result<f64> {
    Ok(evaluate(model, data, exec)?.1)
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(params: &MambaParams<Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = params.flatten().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut MambaParams<Tensor>, grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, p) in params.flatten_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], grads[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps) + cfg.weight_decay * *w;
                *w -= cfg.learning_rate * update;
            }
        }
    }
}

/// Trains a copy of `model` on `data`.
///
/// A `val_fraction` share of `data` (at least one example when the
/// fraction is positive and `data` has two or more examples) is held out;
/// without a held-out split the training loss drives early stopping.
pub fn train(model: &MambaModel, data: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    check_labels(model, data)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(derive_seed(cfg.seed, streams::SPLIT), 0));
    let n_val = if cfg.val_fraction > 0.0 && data.len() >= 2 {
        ((data.len() as f64 * cfg.val_fraction).ceil() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let val: Vec<Example> = order[..n_val].iter().map(|&i| data[i].clone()).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    train_idx.sort_unstable();

    let config = model.config().clone();
    let mut params = model.params().clone();
    let mut adam = AdamW::new(&params);
    let mut history = Vec::new();
    let mut best: Option<(f64, MambaParams<Tensor>, usize)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut stream_rng(derive_seed(cfg.seed, streams::SHUFFLE), epoch as u64));
        let mut loss_sum = 0.0;
        for batch in epoch_order.chunks(cfg.batch_size) {
            let current = MambaModel::from_params(config.clone(), params.clone())?;
            let per = par::try_map_indexed(batch.len(), cfg.execution, |i| {
                example_gradient(&current, &data[batch[i]])
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = per[0].1.iter().map(|g| Tensor::zeros(g.shape())).collect();
            for (loss, g) in &per {
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.add_assign(gi);
                }
            }
            let mut norm_sq = 0.0;
            for g in grads.iter_mut() {
                *g = g.map(|v| v * scale);
                norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            if !loss_sum.is_finite() || !norm_sq.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: "non-finite loss or gradient".into(),
                });
            }
            let norm = norm_sq.sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for g in grads.iter_mut() {
                    *g = g.map(|v| v * s);
                }
            }
            adam.step(&mut params, &grads, cfg);
        }
        let current = MambaModel::from_params(config.clone(), params.clone())?;
        let train_loss = loss_sum / train_idx.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate(&current, &val, cfg.execution)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("held-out loss is {val_loss}"),
            });
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, params.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (best_params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome {
        model: MambaModel::from_params(config, best_params)?,
        history,
        best_epoch,
    })
}

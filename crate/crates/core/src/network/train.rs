use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, save_checkpoint, ForwardOptions, Network};
use crate::autodiff::{Graph, Tensor, Var};
use crate::blocks::Penalty;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamId, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step.
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub nesterov: bool,
    /// Applied to affine and convolution weights only.
    pub weight_decay: f64,
    /// Weight of the coding losses in the total loss.
    pub mu: f64,
    pub p_drop: f64,
    pub penalty: Penalty,
    /// Batch-norm running statistics: `running = (1 - m) * running + m * batch`.
    pub bn_momentum: f64,
    pub seed: u64,
    /// Directory receiving `last.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Evaluate each epoch in parallel chunks.
    pub parallel_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            lr_floor: 1e-4,
            warmup_epochs: 0,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            mu: 6.0,
            p_drop: 0.1,
            penalty: Penalty::default(),
            bn_momentum: 0.9,
            seed: 0,
            checkpoint_dir: None,
            parallel_eval: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop must be in [0, 1), got {}", self.p_drop)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum values outside [0, 1)".into()));
        }
        self.penalty.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub class_loss: f64,
    /// Mean training coding loss per coded block.
    pub coding_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Learning rate at `step` of `total` steps: linear warmup to `lr`, then
/// half-cosine decay reaching `floor` at the last step.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, lr: f64, floor: f64) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup + 1);
    if span == 0 {
        return if total > warmup + 1 { lr } else { floor.min(lr) };
    }
    let t = (step - warmup).min(span) as f64 / span as f64;
    floor + (lr - floor) * 0.5 * (1.0 + (PI * t).cos())
}

/// `class_loss + mu * sum(coding_losses)`.
pub fn total_loss(class_loss: f64, coding_losses: &[f64], mu: f64) -> f64 {
    class_loss + mu * coding_losses.iter().sum::<f64>()
}

fn total_loss_var(g: &mut Graph, class_loss: Var, coding: &[Var], mu: f64) -> Result<Var> {
    let mut total = class_loss;
    for &l in coding {
        let l = g.reshape(l, &[1])?;
        let scaled = g.scale(l, mu);
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

/// Stochastic gradient descent with (Nesterov) momentum in the form used
/// by common frameworks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, param: ParamId, value: &mut [f64], grad: &[f64], decay: bool, lr: f64) {
        let i = param.index();
        if self.buffers.len() <= i {
            self.buffers.resize(i + 1, None);
        }
        let wd = if decay { self.weight_decay } else { 0.0 };
        let buf = self.buffers[i].get_or_insert_with(|| vec![0.0; value.len()]);
        for ((p, &g), b) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let g = g + wd * *p;
            *b = self.momentum * *b + g;
            let update = if self.nesterov { g + self.momentum * *b } else { *b };
            *p -= lr * update;
        }
    }
}

/// Trains `net` in place and appends one [`EpochRecord`] per epoch. On a
/// non-finite loss the offending update is skipped and training stops with
/// [`Error::Diverged`].
pub fn train(net: &mut Network, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if data.num_classes != net.arch.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, network {}",
            data.num_classes, net.arch.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.nesterov, cfg.weight_decay);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let coded = net.coded_blocks().len();
    let start_epoch = net.history.len();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut class_sum, mut hits, mut seen) = (0.0, 0.0, 0usize, 0usize);
        let mut coding_sum = vec![0.0; coded];
        let mut lr = cfg.lr;

        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total_steps, warmup, cfg.lr, cfg.lr_floor);
            let x = data.x.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let mut g = Graph::new(net.precision);
            let mut s = Session::new(&mut g, &net.store, Mode::Train, ChaCha8Rng::seed_from_u64(rng.next_u64()));
            let opts = ForwardOptions {
                labels: Some(&labels),
                p_drop: cfg.p_drop,
                penalty: cfg.penalty,
                removals: &[],
            };
            let out = net.forward(&mut s, &x, &opts)?;
            let ce = s.graph.cross_entropy(out.logits, &labels)?;
            let total = total_loss_var(s.graph, ce, &out.coding_losses, cfg.mu)?;
            let moments = s.take_moments();
            let bindings: Vec<(ParamId, Var)> = s.bindings().collect();
            drop(s);

            let loss = g.value(total).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: start_epoch + epoch,
                    loss,
                    checkpoint: last_checkpoint,
                });
            }
            let mut grads = g.backward(total, None)?;
            let b = labels.len();
            loss_sum += loss * b as f64;
            class_sum += g.value(ce).data()[0] * b as f64;
            for (acc, &l) in coding_sum.iter_mut().zip(&out.coding_losses) {
                *acc += g.value(l).data()[0] * b as f64;
            }
            let preds = g.value(out.logits);
            hits += (accuracy(preds, &labels) * b as f64).round() as usize;
            seen += b;

            for (id, var) in bindings {
                let grad = grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(net.store.value(id).shape()));
                let decay = net.store.param(id).decay;
                let value = net.store.value_mut(id).data_mut();
                opt.step(id, value, grad.data(), decay, lr);
                net.precision.round_slice(value);
            }
            net.store.update_running_stats(&moments, cfg.bn_momentum);
            step += 1;
        }

        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(net.evaluate(v, 256, cfg.parallel_eval)?.accuracy),
            _ => None,
        };
        let n = seen.max(1) as f64;
        let record = EpochRecord {
            epoch: start_epoch + epoch,
            lr,
            loss: loss_sum / n,
            class_loss: class_sum / n,
            coding_losses: coding_sum.iter().map(|c| c / n).collect(),
            train_accuracy: hits as f64 / n,
            val_accuracy,
        };
        log::info!(
            "epoch {} loss {:.4} ce {:.4} train acc {:.4} val acc {:?}",
            record.epoch,
            record.loss,
            record.class_loss,
            record.train_accuracy,
            record.val_accuracy
        );
        net.history.push(record);
        if let Some(dir) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("last.ckpt");
            save_checkpoint(net, &path)?;
            last_checkpoint = Some(path);
        }
    }
    Ok(())
}

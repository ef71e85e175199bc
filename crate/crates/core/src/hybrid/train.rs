//! Mini-batch training with per-clip tapes.
//!
//! Each clip in a batch runs forward and backward on its own tape; the
//! parameter gradients are averaged over the batch, clipped by global norm
//! and applied with Adam under the warmup schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::cross_domain_loss;
use super::model::DchtModel;
use super::optim::{clip_gradients, lr_schedule, Adam, Grads};
use crate::dsp::Pair;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_tf: f64,
    pub loss_t: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Loss values of one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipLoss {
    pub total: f64,
    pub tf: f64,
    pub t: f64,
}

fn clip_var(ctx: &Ctx, clip: &crate::dsp::AudioClip) -> crate::autodiff::Var {
    ctx.input(Tensor::from_vec(clip.samples().to_vec()))
}

pub struct Trainer<'m> {
    pub model: &'m DchtModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub state: TrainState,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m DchtModel, store: ParamStore) -> Self {
        let t = &model.config.train;
        Trainer {
            model,
            store,
            adam: Adam::new(t.beta1, t.beta2, t.eps),
            state: TrainState {
                step: 0,
                epoch: 0,
                lr: 0.0,
                seed: t.seed,
            },
        }
    }

    /// Loss of one clip and, when `grads` is set, its parameter gradients.
    pub fn clip_loss(&self, pair: &Pair, grads: bool, seed: u64) -> Result<(ClipLoss, Option<Grads>)> {
        let ctx = if grads {
            Ctx::train(&self.store, seed)
        } else {
            Ctx::eval(&self.store)
        };
        let noisy = clip_var(&ctx, &pair.noisy);
        let clean = clip_var(&ctx, &pair.clean);
        let out = self.model.forward(&ctx, &noisy)?;
        let cfg = &self.model.config;
        let parts = cross_domain_loss(&clean, &out.enhanced, &noisy, cfg.stft, &cfg.loss)?;
        let loss = ClipLoss {
            total: parts.total.item(),
            tf: parts.tf.item(),
            t: parts.t.item(),
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                location: format!("loss of clip {}", pair.name),
                index: 0,
            });
        }
        if !grads {
            return Ok((loss, None));
        }
        parts.total.backward()?;
        Ok((loss, Some(ctx.grads())))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Pair]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut sum: Option<Grads> = None;
        let mut loss = ClipLoss { total: 0.0, tf: 0.0, t: 0.0 };
        let base = self.state.seed ^ ((self.state.step as u64 + 1) << 20);
        for (i, pair) in batch.iter().enumerate() {
            let (l, g) = self.clip_loss(pair, true, base + i as u64)?;
            loss.total += l.total;
            loss.tf += l.tf;
            loss.t += l.t;
            let g = g.expect("gradients requested");
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (name, t) in g {
                        let slot = acc.entry(name).or_insert_with(|| Tensor::zeros(t.shape()));
                        slot.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let mut grads = sum.unwrap_or_default();
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        let cfg = &self.model.config.train;
        let grad_norm = clip_gradients(&mut grads, cfg.max_grad_norm)?;
        self.state.step += 1;
        self.state.lr = lr_schedule(self.state.step, cfg.d_model, cfg.warmup, cfg.lr_scale);
        self.adam.step(&mut self.store, &grads, self.state.lr)?;
        Ok(StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            loss: loss.total / n,
            loss_tf: loss.tf / n,
            loss_t: loss.t / n,
            lr: self.state.lr,
            grad_norm,
        })
    }

    /// Mean loss over `pairs` without gradients.
    pub fn mean_loss(&self, pairs: &[Pair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Data("no clips to evaluate".into()));
        }
        let mut total = 0.0;
        for p in pairs {
            total += self.clip_loss(p, false, 0)?.0.total;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// Deterministic hold-out split. Returns `(train, validation)`.
pub fn split_validation(pairs: &[Pair], fraction: f64, seed: u64) -> (Vec<Pair>, Vec<Pair>) {
    let n = pairs.len();
    let n_val = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11d));
    let val = order[..n_val].iter().map(|i| pairs[*i].clone()).collect();
    let mut train_idx = order[n_val..].to_vec();
    train_idx.sort_unstable();
    (train_idx.into_iter().map(|i| pairs[i].clone()).collect(), val)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: ParamStore,
    /// Parameters at the epoch with the lowest validation loss (training
    /// loss when there is no validation set).
    pub best: ParamStore,
    pub best_val: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub state: TrainState,
}

/// Runs the epoch loop. `on_step` sees every step as it completes.
pub fn train(
    model: &DchtModel,
    store: ParamStore,
    train_set: &[Pair],
    val_set: &[Pair],
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.config.train.clone();
    let mut trainer = Trainer::new(model, store);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, trainer.store.clone());
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        trainer.state.epoch = epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if trainer.state.step >= max_steps {
                break;
            }
            let batch: Vec<&Pair> = chunk.iter().map(|i| &train_set[*i]).collect();
            let log = trainer.step(&batch)?;
            on_step(&log);
            epoch_loss += log.loss;
            batches += 1;
            steps.push(log);
        }
        if batches == 0 {
            break 'epochs;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            trainer.mean_loss(val_set)?
        };
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, trainer.store.clone());
        }
        if trainer.state.step >= max_steps {
            break;
        }
    }
    Ok(TrainOutcome {
        last: trainer.store,
        best: best.1,
        best_val: best.0,
        steps,
        epochs,
        state: trainer.state,
    })
}

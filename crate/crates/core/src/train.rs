//! Minibatch SGD over whole sequences.
//!
//! Each sequence is encoded once; all frames are extrapolated and classified
//! in the same pass. Per-sequence gradients are computed in parallel and
//! reduced in batch order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::model::{argmax, Model};
use crate::params::ParamStore;
use crate::tensor::{Gradients, Real, Tensor};

/// Per-epoch averages over the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_pred: f64,
    pub l_feat: f64,
    pub total: f64,
    /// Accuracy of the last frame's prediction, measured during the epoch.
    pub train_acc: f64,
}

/// Model, parameters and optimizer state.
#[derive(Clone)]
pub struct Trainer<T: Real> {
    pub config: Config,
    pub model: Model,
    pub params: ParamStore<T>,
    /// Momentum buffer per parameter, in registration order.
    pub velocity: Vec<Vec<T>>,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Loss bundle and full-observation correctness of one sequence.
pub struct SequenceResult<T: Real> {
    pub grads: Gradients<T>,
    pub losses: LossBundle,
    pub correct: bool,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let model = Model::new(config.model.clone(), &mut params, &mut rng)?;
        let velocity = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        Ok(Trainer {
            config,
            model,
            params,
            velocity,
            epoch: 0,
            log: Vec::new(),
        })
    }

    /// Forward and backward pass of one sequence `[T, V, 3]`.
    pub fn sequence_grad(&self, x: &Tensor<T>, label: usize) -> Result<SequenceResult<T>> {
        let g = self.params.graph();
        let fwd = self.model.forward(&g, x)?;
        let losses = self.model.losses(&g, &fwd, x, label, &self.config.train)?;
        let probs = fwd.probs.value();
        let last = probs.index0(probs.shape()[0] - 1);
        let correct = argmax(last.data()) == label;
        let bundle = losses.bundle();
        let grads = g.backward(losses.total)?;
        Ok(SequenceResult {
            grads,
            losses: bundle,
            correct,
        })
    }

    /// Visiting order of epoch `epoch` (1-based), a function of the seed only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch over preprocessed sequences of equal length.
    pub fn train_epoch(&mut self, xs: &[Tensor<T>], labels: &[usize]) -> Result<EpochLog> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::contract(format!(
                "training needs a nonempty dataset with one label per sequence ({} vs {})",
                xs.len(),
                labels.len()
            )));
        }
        let epoch = self.epoch + 1;
        let lr = self.config.train.lr_after(self.epoch);
        let order = self.epoch_order(epoch, xs.len());
        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for (b, batch) in order.chunks(self.config.train.batch_size).enumerate() {
            let results: Vec<SequenceResult<T>> = batch
                .par_iter()
                .map(|&i| self.sequence_grad(&xs[i], labels[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    // the causal mask never empties a row, so this is overflow
                    Error::Masking { .. } => Error::Divergence {
                        epoch,
                        batch: b + 1,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
            self.params.zero_grad();
            let scale = T::c(1.0 / batch.len() as f64);
            let mut batch_total = 0.0;
            for r in &results {
                let l = r.losses;
                if !l.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b + 1,
                        loss: l.total,
                    });
                }
                self.params.accumulate(&r.grads, scale);
                sums[0] += l.l_cls;
                sums[1] += l.l_pred;
                sums[2] += l.l_feat;
                sums[3] += l.total;
                batch_total += l.total;
                correct += r.correct as usize;
            }
            self.step(lr);
            if self.params.tensors().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: batch_total / batch.len() as f64,
                });
            }
        }
        let n = xs.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            l_cls: sums[0] / n,
            l_pred: sums[1] / n,
            l_feat: sums[2] / n,
            total: sums[3] / n,
            train_acc: correct as f64 / n,
        };
        self.epoch = epoch;
        self.log.push(entry);
        Ok(entry)
    }

    /// `v ← μ·v + (∇ + λ_wd·θ)`, `θ ← θ − lr·v`, using the accumulated gradients.
    pub fn step(&mut self, lr: f64) {
        let (mu, wd, lr) = (
            T::c(self.config.train.momentum),
            T::c(self.config.train.weight_decay),
            T::c(lr),
        );
        for (p, v) in self.params.iter_mut().zip(self.velocity.iter_mut()) {
            let theta = p.value.data_mut();
            for ((w, &g), m) in theta.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *m = mu * *m + g + wd * *w;
                *w -= lr * *m;
            }
        }
    }

    /// Trains until `max_epochs`, calling `on_epoch` after each epoch.
    pub fn fit(
        &mut self,
        xs: &[Tensor<T>],
        labels: &[usize],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<()> {
        while self.epoch < self.config.train.max_epochs {
            let entry = self.train_epoch(xs, labels)?;
            on_epoch(&entry);
        }
        Ok(())
    }

    /// Per-frame probabilities `[T, C]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.model.predict(&self.params, x)
    }
}

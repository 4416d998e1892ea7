//! Mini-batch training with best-epoch selection on the development set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, build_model, Batch, ModelSpec, ModelState, EVAL_CHUNK};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::{Graph, Tensor};

/// A labelled feature map.
pub type Example<'a> = (&'a Tensor<f32>, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(optim: OptimConfig, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size,
            optim,
            seed,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-indexed.
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// 1-indexed epoch of the highest dev accuracy; the earliest wins ties.
pub fn best_epoch(dev_accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &a) in dev_accuracies.iter().enumerate() {
        if best.map_or(true, |(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Eval-mode accuracy over `items`.
pub fn accuracy(state: &ModelState, items: &[Example<'_>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample list"));
    }
    Ok(state.evaluate(&Batch::chunked(items, EVAL_CHUNK)?)?.accuracy())
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Trains from a fresh initialization seeded by `cfg.seed` and returns the
/// state of the epoch with the best dev accuracy.
pub fn train(spec: &ModelSpec, train_set: &[Example<'_>], dev_set: &[Example<'_>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, train_set, dev_set, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    spec: &ModelSpec,
    train_set: &[Example<'_>],
    dev_set: &[Example<'_>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("training needs nonempty train and dev sets"));
    }
    let mut state = build_model(spec, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optim)?;
    let dev_batches = Batch::chunked(dev_set, EVAL_CHUNK)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelState)> = None;

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch = Batch::stack(idx.iter().map(|&i| train_set[i]))?;
            let mut g = Graph::new();
            let fwd = state.forward(&mut g, &state.params, &batch.inputs, crate::nn::Mode::Train)?;
            let loss = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
            let l = g.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, logs });
            }
            loss_sum += l * batch.len() as f64;
            let logits = g.value(fwd.logits);
            let k = logits.shape()[1];
            correct += logits
                .data()
                .chunks(k)
                .zip(&batch.labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            g.backward(loss)?;
            let grads: Vec<&[f32]> = fwd
                .params
                .iter()
                .map(|&p| g.grad(p).map(|t| t.data()).unwrap_or(&[]))
                .collect();
            match opt.step(&mut state.params, &grads) {
                Err(Error::NonFiniteGradient(_)) => return Err(Error::Diverged { epoch, logs }),
                r => r?,
            }
            state.update_running_stats(&g, &fwd);
        }
        let dev = state.evaluate(&dev_batches)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            dev_accuracy: dev.accuracy(),
        };
        on_epoch(&log);
        logs.push(log);
        if best.as_ref().map_or(true, |(_, a, _)| log.dev_accuracy > *a) {
            let mut snapshot = state.clone();
            snapshot.epoch = epoch;
            best = Some((epoch, log.dev_accuracy, snapshot));
        }
    }
    let (best_epoch, _, mut state) = best.expect("at least one epoch");
    let log = logs[best_epoch - 1];
    state.metrics.insert("train_loss".into(), log.train_loss);
    state.metrics.insert("train_accuracy".into(), log.train_accuracy);
    state.metrics.insert("dev_accuracy".into(), log.dev_accuracy);
    Ok(TrainOutcome {
        state,
        logs,
        best_epoch,
    })
}

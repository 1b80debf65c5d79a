//! Per-task training loop and evaluation.

use crate::autodiff::{OptimizerKind, OptimizerState};
use crate::baselines::{train_step, MethodSpec};
use crate::error::{Error, Result};
use crate::harness::tasks::{shuffled_indices, Dataset};
use crate::model::Model;
use crate::rng::rng_for;

pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_EPOCHS: usize = 1;
const EVAL_BATCH: usize = 64;

/// Optimization settings for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

/// Losses recorded while training one task.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskLog {
    pub losses: Vec<f64>,
}

impl TaskLog {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

/// Train the parameters `model` currently marks trainable on `data`.
///
/// `stream` names the randomness: batches are shuffled and dropout is drawn
/// from RNGs keyed by `(seed, stream)`, so two calls with the same key see
/// the same batches. A fresh optimizer is used per call.
pub fn train_task(model: &mut Model, method: &MethodSpec, data: &Dataset, cfg: &TrainConfig, seed: u64, stream: &str) -> Result<TaskLog> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Usage("cannot train on an empty split".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut dropout = rng_for(seed, &format!("{stream}.dropout"));
    let mut log = TaskLog::default();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng_for(seed, &format!("{stream}.shuffle.{epoch}"));
        let order = shuffled_indices(data.len(), &mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(chunk)?;
            let step = log.losses.len();
            let loss = train_step(model, method, &mut opt, &batch, &labels, Some(&mut dropout)).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                other => other,
            })?;
            log.losses.push(loss);
        }
    }
    model.store.zero_grads();
    Ok(log)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode argmax accuracy over `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty split".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (batch, labels) = data.batch(chunk)?;
        let logits = model.logits(&batch)?;
        for (r, &y) in labels.iter().enumerate() {
            if argmax(logits.row(r)) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -0.5, -2.0]), 1);
    }
}

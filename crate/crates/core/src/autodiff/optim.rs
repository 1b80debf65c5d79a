use std::collections::BTreeMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Learning rate used when none is configured.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// SGD or Adam over the trainable parameters of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    adam: AdamHyper,
    moments: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            adam: AdamHyper::default(),
            moments: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Parameter ids that currently hold Adam moments.
    pub fn tracked(&self) -> Vec<ParamId> {
        self.moments.keys().copied().collect()
    }

    /// Update every trainable parameter from its gradient, then clear all
    /// gradients. Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let trainable = store.trainable_ids();
        for &id in &trainable {
            if store.get(id).grad().is_none() {
                return Err(Error::Usage(format!(
                    "trainable parameter {} has no gradient",
                    store.name(id)
                )));
            }
        }
        self.moments.retain(|id, _| store.is_trainable(*id));
        self.step += 1;
        let t = self.step as i32;
        for id in trainable {
            let grad = store.get(id).grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.learning_rate;
                    store
                        .get_mut(id)
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(w, g)| *w -= lr * g);
                }
                OptimizerKind::Adam => {
                    let AdamHyper { beta1, beta2, eps } = self.adam;
                    let mom = self.moments.entry(id).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let lr = self.learning_rate;
                    let w = store.get_mut(id).data_mut();
                    for i in 0..grad.len() {
                        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * grad[i];
                        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let mhat = mom.m[i] / bc1;
                        let vhat = mom.v[i] / bc2;
                        w[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value), true).unwrap();
        s.get_mut(id).accumulate_grad(&[grad]);
        (s, id)
    }

    #[test]
    fn sgd_single_step() {
        let (mut s, id) = one_param(1.0, 2.0);
        OptimizerState::sgd(0.1).unwrap().step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 0.8).abs() < 1e-15);
        assert!(s.get(id).grad().is_none());
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let (mut s, id) = one_param(1.25, 0.0);
        OptimizerState::sgd(0.1).unwrap().step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 1.25);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let (mut s, id) = one_param(0.0, g);
            OptimizerState::adam(1e-2).unwrap().step(&mut s).unwrap();
            let expected = -1e-2 * g / (g.abs() + 1e-8);
            assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
            assert!((s.get(id).data()[0].abs() - 1e-2).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0), true).unwrap();
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::Usage(_))));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_untouched_and_moments_only_for_trainable() {
        let mut s = ParamStore::new();
        let frozen = s.add("f", Tensor::filled(&[3], 0.3), false).unwrap();
        let live = s.add("l", Tensor::filled(&[2], 1.0), true).unwrap();
        s.get_mut(live).accumulate_grad(&[1.0, -1.0]);
        let before = s.get(frozen).to_le_bytes();
        let mut opt = OptimizerState::adam(0.1).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(frozen).to_le_bytes(), before);
        assert_eq!(opt.tracked(), vec![live]);
        assert_eq!(opt.steps(), 1);
    }
}

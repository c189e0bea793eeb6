use serde::{Deserialize, Serialize};

use super::{NdArray, ParameterStore};
use crate::error::{Error, Result};

/// Adam hyperparameters and the step-decay learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Decay never pushes the rate below `min(min_lr, lr)`.
    pub min_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.5,
            decay_every: 25,
            min_lr: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    lr: f64,
    step: u64,
    first: Vec<NdArray>,
    second: Vec<NdArray>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Self {
        let first: Vec<_> = store.ids().map(|id| NdArray::zeros(store.value(id).shape())).collect();
        Self {
            lr: config.lr,
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update from the store's gradient slots:
    /// `θ -= lr·sqrt(1-β2^t)/(1-β1^t) · m / (sqrt(v) + ε)`.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if store.len() != self.first.len()
            || store
                .ids()
                .any(|id| store.grad(id).shape() != self.first[id.index()].shape())
        {
            return Err(Error::Gradient(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        if store.ids().any(|id| !store.grad(id).all_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let step_size = self.lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies the schedule after `epoch` (1-based) completes.
    pub fn end_epoch(&mut self, epoch: usize) {
        let c = &self.config;
        if c.decay_every > 0 && epoch > 0 && epoch.is_multiple_of(c.decay_every) {
            let floor = c.min_lr.min(c.lr);
            self.lr = (self.lr * c.decay_factor).max(floor);
        }
    }
}

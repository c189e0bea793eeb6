use serde::{Deserialize, Serialize};

use super::FlowDataset;
use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Per-channel z-score statistics, fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Data("normalizer mean/std lengths differ".into()));
        }
        if let Some(c) = std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroVariance(c));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population mean and standard deviation of every channel of `[.., C]` values.
    pub fn fit_values(values: &NdArray) -> Result<Self> {
        let c = values.last_dim();
        let rows = values.len() / c.max(1);
        if rows == 0 {
            return Err(Error::Data("cannot fit a normalizer on no data".into()));
        }
        let mut mean = vec![0.0; c];
        for row in values.data().chunks_exact(c) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in values.data().chunks_exact(c) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn fit(train: &FlowDataset) -> Result<Self> {
        Self::fit_values(train.flows())
    }

    fn check(&self, x: &NdArray) -> Result<()> {
        if x.last_dim() != self.channels() {
            return Err(Error::shape(format!(
                "normalizer has {} channels, data has shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `(x − μ)/σ` per channel (last axis).
    pub fn apply(&self, x: &NdArray) -> Result<NdArray> {
        self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.channels()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// `x·σ + μ` per channel.
    pub fn invert(&self, x: &NdArray) -> Result<NdArray> {
        self.check(x)?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.channels()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }
}

pub fn fit_normalizer(train: &FlowDataset) -> Result<Normalizer> {
    Normalizer::fit(train)
}

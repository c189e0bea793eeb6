use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::NdArray;

/// Masked forecast errors. `mape` is a fraction; multiply by 100 only for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub threshold: f64,
    pub count: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics report: {e}")))
    }
}

/// Running sums so large evaluations can be accumulated batch by batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, y: &[f64], yhat: &[f64], threshold: f64) {
        for (&t, &p) in y.iter().zip(yhat) {
            if t > threshold {
                let e = (t - p).abs();
                self.abs += e;
                self.sq += e * e;
                self.pct += e / t.abs();
                self.count += 1;
            }
        }
    }

    pub fn finish(&self, threshold: f64) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::EmptyMask(threshold));
        }
        let n = self.count as f64;
        Ok(MetricsReport {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: self.pct / n,
            threshold,
            count: self.count,
        })
    }
}

/// MAE, RMSE and MAPE over the positions where `y > threshold`.
pub fn metrics(y: &NdArray, yhat: &NdArray, threshold: f64) -> Result<MetricsReport> {
    if y.shape() != yhat.shape() {
        return Err(Error::shape(format!(
            "metrics: target {:?} vs forecast {:?}",
            y.shape(),
            yhat.shape()
        )));
    }
    let mut acc = MetricsAccumulator::default();
    acc.add(y.data(), yhat.data(), threshold);
    acc.finish(threshold)
}

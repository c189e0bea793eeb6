use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StgormerConfig;
use crate::numerics::AdamConfig;

use crate::model::config_parse_value as parse_value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Stop after this many optimizer steps (0 = unlimited).
    pub max_steps: usize,
    pub seed: u64,
    /// Mask threshold for evaluation metrics.
    pub threshold: f64,
    /// Window stride when slicing samples.
    pub stride: usize,
    pub adam: AdamConfig,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            patience: 25,
            max_steps: 0,
            seed: 0,
            threshold: 0.0,
            stride: 1,
            adam: AdamConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size: must be ≥ 1".into());
        }
        if self.patience == 0 {
            errs.push("train.patience: must be ≥ 1".into());
        }
        if self.max_epochs == 0 {
            errs.push("train.max_epochs: must be ≥ 1".into());
        }
        if self.stride == 0 {
            errs.push("data.stride: must be ≥ 1".into());
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            errs.push(format!("train.lr: {} must be ≥ 0", a.lr));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            errs.push("train.beta1 / train.beta2: must be in [0, 1)".into());
        }
        if !(a.eps > 0.0) {
            errs.push("train.eps: must be > 0".into());
        }
        if !(a.decay_factor > 0.0 && a.decay_factor <= 1.0) {
            errs.push("train.decay_factor: must be in (0, 1]".into());
        }
        if a.decay_every == 0 {
            errs.push("train.decay_every: must be ≥ 1".into());
        }
        if self.threshold.is_nan() {
            errs.push("data.threshold: must be a number".into());
        }
        errs
    }
}

/// Everything a run needs: model architecture plus training and data settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: StgormerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub const TRAIN_KEYS: &'static [&'static str] = &[
        "train.batch_size",
        "train.max_epochs",
        "train.patience",
        "train.max_steps",
        "train.seed",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.decay_factor",
        "train.decay_every",
        "train.min_lr",
        "data.threshold",
        "data.stride",
    ];

    /// Every accepted key, `model.*` first.
    pub fn keys() -> Vec<String> {
        StgormerConfig::KEYS
            .iter()
            .map(|k| format!("model.{k}"))
            .chain(Self::TRAIN_KEYS.iter().map(|k| k.to_string()))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.get(k);
        }
        let t = &self.train;
        Some(match key {
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.max_steps" => t.max_steps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.lr" => format!("{:?}", t.adam.lr),
            "train.beta1" => format!("{:?}", t.adam.beta1),
            "train.beta2" => format!("{:?}", t.adam.beta2),
            "train.eps" => format!("{:?}", t.adam.eps),
            "train.decay_factor" => format!("{:?}", t.adam.decay_factor),
            "train.decay_every" => t.adam.decay_every.to_string(),
            "train.min_lr" => format!("{:?}", t.adam.min_lr),
            "data.threshold" => format!("{:?}", t.threshold),
            "data.stride" => t.stride.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value).map_err(|e| {
                if e.starts_with("unknown key") {
                    format!("unknown key {key:?}")
                } else {
                    format!("model.{e}")
                }
            });
        }
        let t = &mut self.train;
        match key {
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.max_epochs" => t.max_epochs = parse_value(key, value)?,
            "train.patience" => t.patience = parse_value(key, value)?,
            "train.max_steps" => t.max_steps = parse_value(key, value)?,
            "train.seed" => t.seed = parse_value(key, value)?,
            "train.lr" => t.adam.lr = parse_value(key, value)?,
            "train.beta1" => t.adam.beta1 = parse_value(key, value)?,
            "train.beta2" => t.adam.beta2 = parse_value(key, value)?,
            "train.eps" => t.adam.eps = parse_value(key, value)?,
            "train.decay_factor" => t.adam.decay_factor = parse_value(key, value)?,
            "train.decay_every" => t.adam.decay_every = parse_value(key, value)?,
            "train.min_lr" => t.adam.min_lr = parse_value(key, value)?,
            "data.threshold" => t.threshold = parse_value(key, value)?,
            "data.stride" => t.stride = parse_value(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        Self::keys()
            .into_iter()
            .map(|k| {
                let v = self.get(&k).expect("listed key");
                (k, v)
            })
            .collect()
    }

    /// `key = value` lines, one per setting.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#` comments
    /// are skipped. Every bad line is reported, not only the first.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        errs.push(format!("{origin}:{}: {e}", i + 1));
                    }
                }
                None => errs.push(format!("{origin}:{}: expected key = value, got {line:?}", i + 1)),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut errs = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => {
                    let k = k.trim();
                    // Bare model keys are accepted as a shorthand.
                    let key = if self.get(k).is_none() && self.model.get(k).is_some() {
                        format!("model.{k}")
                    } else {
                        k.to_string()
                    };
                    if let Err(e) = self.set(&key, v) {
                        errs.push(format!("--override {o}: {e}"));
                    }
                }
                None => errs.push(format!("--override {o}: expected key=value")),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = match self.model.validate() {
            Ok(()) => Vec::new(),
            Err(Error::Config(e)) => e.into_iter().map(|e| format!("model.{e}")).collect(),
            Err(e) => vec![e.to_string()],
        };
        errs.extend(self.train.validate());
        if self.model.use_t_in && self.model.temporal_features > 2 {
            errs.push(format!(
                "model.k: {} temporal features requested but timestamps carry 2",
                self.model.temporal_features
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

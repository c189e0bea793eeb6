use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{Activation, Axis};

/// Architecture hyperparameters. Optimizer settings live in the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StgormerConfig {
    /// Hidden width `D`.
    pub hidden: usize,
    pub heads: usize,
    /// Sequence of `S` (spatial) and `T` (temporal) blocks.
    pub block_order: String,
    pub experts: usize,
    /// Expert inner width is `expansion · D`.
    pub expansion: usize,
    pub activation: Activation,
    pub router_depth: usize,
    /// Time2Vec width per temporal feature (`d_t`).
    pub time2vec_dim: usize,
    /// Number of temporal features per step (`k`).
    pub temporal_features: usize,
    /// Degree embedding width (`d`).
    pub degree_dim: usize,
    pub max_degree: usize,
    pub max_spd: usize,
    /// Load-balancing weight `α`.
    pub alpha: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub channels: usize,
    pub use_t_in: bool,
    pub use_s_in: bool,
    pub use_sa_bias: bool,
    pub use_moe: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for StgormerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            block_order: "SSSTTT".into(),
            experts: 6,
            expansion: 4,
            activation: Activation::Relu,
            router_depth: 1,
            time2vec_dim: 8,
            temporal_features: 2,
            degree_dim: 16,
            max_degree: 8,
            max_spd: 10,
            alpha: 0.01,
            t_in: 12,
            t_out: 1,
            channels: 1,
            use_t_in: true,
            use_s_in: true,
            use_sa_bias: true,
            use_moe: true,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("{key}: cannot parse {value:?} ({e})"))
}

impl StgormerConfig {
    /// Keys accepted by [`StgormerConfig::set`], in display order.
    pub const KEYS: &'static [&'static str] = &[
        "D",
        "heads",
        "block_order",
        "experts",
        "expansion",
        "activation",
        "router_depth",
        "d_t",
        "k",
        "d",
        "max_degree",
        "max_spd",
        "alpha",
        "T_in",
        "T_out",
        "channels",
        "use_t_in",
        "use_s_in",
        "use_sa_bias",
        "use_moe",
        "dropout",
        "layer_norm_eps",
        "seed",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "D" => self.hidden.to_string(),
            "heads" => self.heads.to_string(),
            "block_order" => self.block_order.clone(),
            "experts" => self.experts.to_string(),
            "expansion" => self.expansion.to_string(),
            "activation" => self.activation.to_string(),
            "router_depth" => self.router_depth.to_string(),
            "d_t" => self.time2vec_dim.to_string(),
            "k" => self.temporal_features.to_string(),
            "d" => self.degree_dim.to_string(),
            "max_degree" => self.max_degree.to_string(),
            "max_spd" => self.max_spd.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "T_in" => self.t_in.to_string(),
            "T_out" => self.t_out.to_string(),
            "channels" => self.channels.to_string(),
            "use_t_in" => self.use_t_in.to_string(),
            "use_s_in" => self.use_s_in.to_string(),
            "use_sa_bias" => self.use_sa_bias.to_string(),
            "use_moe" => self.use_moe.to_string(),
            "dropout" => format!("{:?}", self.dropout),
            "layer_norm_eps" => format!("{:?}", self.layer_norm_eps),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "D" => self.hidden = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "block_order" => self.block_order = value.trim().to_string(),
            "experts" => self.experts = parse_value(key, value)?,
            "expansion" => self.expansion = parse_value(key, value)?,
            "activation" => self.activation = parse_value(key, value)?,
            "router_depth" => self.router_depth = parse_value(key, value)?,
            "d_t" => self.time2vec_dim = parse_value(key, value)?,
            "k" => self.temporal_features = parse_value(key, value)?,
            "d" => self.degree_dim = parse_value(key, value)?,
            "max_degree" => self.max_degree = parse_value(key, value)?,
            "max_spd" => self.max_spd = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "T_in" => self.t_in = parse_value(key, value)?,
            "T_out" => self.t_out = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "use_t_in" => self.use_t_in = parse_value(key, value)?,
            "use_s_in" => self.use_s_in = parse_value(key, value)?,
            "use_sa_bias" => self.use_sa_bias = parse_value(key, value)?,
            "use_moe" => self.use_moe = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// `(key, value)` pairs for every setting, in [`StgormerConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&k| (k, self.get(k).expect("listed key")))
            .collect()
    }

    pub fn axes(&self) -> Result<Vec<Axis>> {
        parse_block_order(&self.block_order)
    }

    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("D: must be ≥ 1".to_string());
        }
        if self.heads == 0 {
            errs.push("heads: must be ≥ 1".to_string());
        } else if !self.hidden.is_multiple_of(self.heads) {
            errs.push(format!(
                "D: {} is not divisible by heads = {}",
                self.hidden, self.heads
            ));
        }
        if let Err(Error::Config(e)) = parse_block_order(&self.block_order) {
            errs.extend(e);
        }
        if self.experts == 0 {
            errs.push("experts: must be ≥ 1".into());
        }
        if self.expansion == 0 {
            errs.push("expansion: must be ≥ 1".into());
        }
        if self.router_depth == 0 {
            errs.push("router_depth: must be ≥ 1".into());
        }
        if self.use_t_in && (self.time2vec_dim == 0 || self.temporal_features == 0) {
            errs.push("d_t and k: must be ≥ 1 when use_t_in is on".into());
        }
        if self.use_s_in && self.degree_dim == 0 {
            errs.push("d: must be ≥ 1 when use_s_in is on".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            errs.push(format!("alpha: {} must be a finite value ≥ 0", self.alpha));
        }
        if self.t_in == 0 || self.t_out == 0 {
            errs.push("T_in and T_out: must be ≥ 1".into());
        }
        if self.channels == 0 {
            errs.push("channels: must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout: {} is not in [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            errs.push("layer_norm_eps: must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

pub fn parse_block_order(order: &str) -> Result<Vec<Axis>> {
    if order.is_empty() {
        return Err(Error::Config(vec!["block_order: must not be empty".into()]));
    }
    order
        .chars()
        .map(|c| match c {
            'S' => Ok(Axis::Spatial),
            'T' => Ok(Axis::Temporal),
            other => Err(Error::Config(vec![format!(
                "block_order: {other:?} is not S or T in {order:?}"
            )])),
        })
        .collect()
}

pub fn format_block_order(axes: &[Axis]) -> String {
    axes.iter()
        .map(|a| match a {
            Axis::Spatial => 'S',
            Axis::Temporal => 'T',
        })
        .collect()
}

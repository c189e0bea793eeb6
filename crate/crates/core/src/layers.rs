//! Small parameterized building blocks shared by the model modules.

use crate::error::Result;
use crate::numerics::{Init, ParamId, ParameterStore, Tape, Var};

/// Fully connected layer `x·W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.init(
            &format!("{prefix}.weight"),
            &[in_dim, out_dim],
            Init::FanIn(in_dim),
            seed,
        )?;
        let bias = store.init(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, seed)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize, eps: f64) -> Result<Self> {
        let gamma = store.init(&format!("{prefix}.gamma"), &[dim], Init::Ones, 0)?;
        let beta = store.init(&format!("{prefix}.beta"), &[dim], Init::Zeros, 0)?;
        Ok(Self { gamma, beta, eps })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

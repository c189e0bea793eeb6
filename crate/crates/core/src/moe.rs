//! Mixture-of-experts feedforward block with dense soft routing and the
//! load-balancing penalty on expert usage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{NdArray, ParameterStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sin,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "sin" => Ok(Self::Sin),
            other => Err(format!("unknown activation {other:?} (expected relu or sin)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Sin => "sin",
        })
    }
}

/// Two-layer point-wise feedforward network `D → m·D → D`.
#[derive(Debug, Clone)]
pub struct ExpertFnn {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl ExpertFnn {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        expansion: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let hidden = dim * expansion;
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, seed)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, seed)?,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Sin => tape.sin(h),
        };
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Spatial,
    Temporal,
}

/// Gating MLP producing a softmax distribution over experts for every token.
#[derive(Debug, Clone)]
pub struct Router {
    layers: Vec<Linear>,
    pub axis: Axis,
}

impl Router {
    /// `depth` linear layers (≥ 1) with ReLU between them; hidden width is `dim`.
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        experts: usize,
        depth: usize,
        axis: Axis,
        seed: u64,
    ) -> Result<Self> {
        if experts == 0 || depth == 0 {
            return Err(Error::Config(vec![format!(
                "{prefix}: router needs ≥ 1 expert and ≥ 1 layer"
            )]));
        }
        let layers = (0..depth)
            .map(|i| {
                let out = if i + 1 == depth { experts } else { dim };
                let name = if depth == 1 {
                    prefix.to_string()
                } else {
                    format!("{prefix}.{i}")
                };
                Linear::new(store, &name, dim, out, seed)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, axis })
    }

    pub fn experts(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Gate weights `[..., E]` for hidden states `[..., D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = layer.forward(tape, store, h)?;
        }
        Ok(tape.softmax(h))
    }
}

#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<ExpertFnn>,
}

/// Symbolic outputs of one MoE layer.
#[derive(Debug, Clone, Copy)]
pub struct MoeOutput {
    pub output: Var,
    /// Gate weights per token, `[..., E]`.
    pub weights: Var,
    /// Mean gate probability per expert over the layer's tokens, `[E]`.
    pub fractions: Var,
}

impl MoeLayer {
    pub fn new(router: Router, experts: Vec<ExpertFnn>) -> Result<Self> {
        if experts.len() != router.experts() {
            return Err(Error::Config(vec![format!(
                "router width {} does not match {} experts",
                router.experts(),
                experts.len()
            )]));
        }
        Ok(Self { router, experts })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `out = Σ_i gate_i(x) ⊙ expert_i(x)` over all experts.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<MoeOutput> {
        let shape = tape.shape(x).to_vec();
        let weights = self.router.forward(tape, store, x)?;
        let mut out: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(tape, store, x)?;
            let w = tape.narrow(weights, i, 1)?;
            let w = tape.broadcast_to(w, &shape)?;
            let term = tape.mul(w, y)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let fractions = tape.mean_rows(weights);
        Ok(MoeOutput {
            output: out.expect("at least one expert"),
            weights,
            fractions,
        })
    }
}

/// `(1/E)·Σ f_i²`.
pub fn load_balance_from_fractions(fractions: &[f64]) -> f64 {
    let e = fractions.len() as f64;
    fractions.iter().map(|f| f * f).sum::<f64>() / e
}

/// Differentiable load-balancing term averaged over MoE layers; 0 when empty.
pub fn load_balance_var(tape: &mut Tape, fractions: &[Var]) -> Result<Option<Var>> {
    if fractions.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &f in fractions {
        let e = tape.value(f).len() as f64;
        let sq = tape.square(f);
        let s = tape.sum(sq);
        let term = tape.scale(s, 1.0 / e);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.unwrap();
    Ok(Some(tape.scale(total, 1.0 / fractions.len() as f64)))
}

/// Accumulated gate probabilities for one MoE layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerGateStats {
    pub prob_sum: Vec<f64>,
    pub tokens: usize,
}

impl LayerGateStats {
    /// Mean gate probability per expert.
    pub fn fractions(&self) -> Result<Vec<f64>> {
        if self.tokens == 0 {
            return Err(Error::EmptyState);
        }
        Ok(self.prob_sum.iter().map(|p| p / self.tokens as f64).collect())
    }
}

/// Per-layer gate statistics feeding the load-balancing loss and reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoeState {
    pub layers: Vec<LayerGateStats>,
}

impl MoeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.layers.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.tokens == 0)
    }

    /// Adds gate weights `[..., E]` to the statistics of `layer`.
    pub fn record(&mut self, layer: usize, weights: &NdArray) {
        let e = weights.last_dim();
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, LayerGateStats::default);
        }
        let stats = &mut self.layers[layer];
        if stats.prob_sum.len() != e {
            stats.prob_sum = vec![0.0; e];
            stats.tokens = 0;
        }
        for row in weights.data().chunks_exact(e) {
            for (acc, w) in stats.prob_sum.iter_mut().zip(row) {
                *acc += w;
            }
            stats.tokens += 1;
        }
    }

    pub fn merge(&mut self, other: &MoeState) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize_with(other.layers.len(), LayerGateStats::default);
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            if theirs.tokens == 0 {
                continue;
            }
            if mine.prob_sum.len() != theirs.prob_sum.len() {
                *mine = theirs.clone();
                continue;
            }
            for (a, b) in mine.prob_sum.iter_mut().zip(&theirs.prob_sum) {
                *a += b;
            }
            mine.tokens += theirs.tokens;
        }
    }

    pub fn fractions(&self, layer: usize) -> Result<Vec<f64>> {
        self.layers.get(layer).ok_or(Error::EmptyState)?.fractions()
    }

    pub fn all_fractions(&self) -> Result<Vec<Vec<f64>>> {
        self.layers.iter().map(LayerGateStats::fractions).collect()
    }

    /// Load-balancing loss averaged over layers.
    pub fn load_balance_loss(&self) -> Result<f64> {
        if self.layers.is_empty() {
            return Err(Error::EmptyState);
        }
        let mut total = 0.0;
        for l in &self.layers {
            total += load_balance_from_fractions(&l.fractions()?);
        }
        Ok(total / self.layers.len() as f64)
    }
}

/// Gate weights `[T, N, E]` for hidden states `[T, N, D]`.
pub fn gate(hidden: &NdArray, router: &Router, store: &ParameterStore) -> Result<NdArray> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let w = router.forward(&mut tape, store, h)?;
    Ok(tape.value(w).clone())
}

/// Evaluates a MoE layer on concrete values, recording gate statistics as `layer`.
pub fn moe_forward(
    hidden: &NdArray,
    moe: &MoeLayer,
    store: &ParameterStore,
    state: &mut MoeState,
    layer: usize,
) -> Result<NdArray> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let out = moe.forward(&mut tape, store, h)?;
    state.record(layer, tape.value(out.weights));
    Ok(tape.value(out.output).clone())
}

/// Load-balancing loss of an accumulated state.
pub fn load_balance_loss(state: &MoeState) -> Result<f64> {
    state.load_balance_loss()
}

//! The full forecaster: input encodings, a configurable stack of spatial and
//! temporal transformer blocks with mixture-of-experts feedforward layers, and
//! a regression head over the flattened per-node time axis.

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};

pub use config::{format_block_order, parse_block_order, StgormerConfig};
pub(crate) use config::parse_value as config_parse_value;

use crate::attention::{spatial_attention, temporal_attention, AttentionParams, SpdBiasTable};
use crate::data::Normalizer;
use crate::encoding::{DegreeEmbedding, FusionLayer, TemporalEncoding};
use crate::error::{Error, Result};
use crate::graph::{SpatioTemporalGraph, SpdMatrix};
use crate::layers::{LayerNorm, Linear};
use crate::moe::{load_balance_var, Axis, ExpertFnn, MoeLayer, MoeState, Router};
use crate::numerics::{
    finite_difference_check, GradCheckOptions, GradCheckReport, NdArray, ParameterStore, Tape, Var,
};

/// Feedforward sublayer of a block.
#[derive(Debug, Clone)]
pub enum FeedForward {
    Moe(MoeLayer),
    Plain(ExpertFnn),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub axis: Axis,
    pub attention: AttentionParams,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

/// Symbolic outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T_out, N, C]`.
    pub prediction: Var,
    /// Mean gate probability per expert, one `[E]` node per MoE layer.
    pub fractions: Vec<Var>,
    /// Gate weights `[B, T, N, E]` per MoE layer.
    pub gate_weights: Vec<Var>,
    /// Axes of the blocks in the order they ran.
    pub trace: Vec<Axis>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub mae: Var,
    pub lb: Option<Var>,
}

/// Concrete loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mae: f64,
    pub lb: f64,
}

#[derive(Debug, Clone)]
pub struct StgormerModel {
    config: StgormerConfig,
    graph: Arc<SpatioTemporalGraph>,
    spd: SpdMatrix,
    store: ParameterStore,
    temporal: Option<TemporalEncoding>,
    degree: Option<DegreeEmbedding>,
    fusion: FusionLayer,
    sa_bias: Option<SpdBiasTable>,
    blocks: Vec<Block>,
    head: Linear,
    normalizer: Option<Normalizer>,
}

const CHECKPOINT_MAGIC: &str = "stgormer-checkpoint v1";

impl StgormerModel {
    pub fn build(config: StgormerConfig, graph: Arc<SpatioTemporalGraph>) -> Result<Self> {
        config.validate()?;
        let axes = config.axes()?;
        let seed = config.seed;
        let d = config.hidden;
        let mut store = ParameterStore::new();

        let temporal = if config.use_t_in {
            Some(TemporalEncoding::new(
                &mut store,
                "encoding.time2vec",
                config.temporal_features,
                config.time2vec_dim,
            )?)
        } else {
            None
        };
        let degree = if config.use_s_in {
            Some(DegreeEmbedding::new(
                &mut store,
                "encoding.degree",
                config.max_degree,
                config.degree_dim,
                seed,
            )?)
        } else {
            None
        };
        let in_width = config.channels
            + temporal.as_ref().map_or(0, TemporalEncoding::width)
            + degree.as_ref().map_or(0, DegreeEmbedding::dim);
        let fusion = FusionLayer::new(&mut store, "encoding.fusion", in_width, d, seed)?;
        let sa_bias = if config.use_sa_bias && axes.contains(&Axis::Spatial) {
            Some(SpdBiasTable::new(&mut store, "spd_bias.table", config.max_spd, seed)?)
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(axes.len());
        for (i, &axis) in axes.iter().enumerate() {
            let p = format!("blocks.{i}");
            let attention = AttentionParams::new(&mut store, &format!("{p}.attn"), d, config.heads, seed)?;
            let ffn = if config.use_moe {
                let router_name = match axis {
                    Axis::Spatial => format!("{p}.moe.spatial_router"),
                    Axis::Temporal => format!("{p}.moe.temporal_router"),
                };
                let router = Router::new(
                    &mut store,
                    &router_name,
                    d,
                    config.experts,
                    config.router_depth,
                    axis,
                    seed,
                )?;
                let experts = (0..config.experts)
                    .map(|j| {
                        ExpertFnn::new(
                            &mut store,
                            &format!("{p}.moe.experts.{j}"),
                            d,
                            config.expansion,
                            config.activation,
                            seed,
                        )
                    })
                    .collect::<Result<_>>()?;
                FeedForward::Moe(MoeLayer::new(router, experts)?)
            } else {
                FeedForward::Plain(ExpertFnn::new(
                    &mut store,
                    &format!("{p}.ffn"),
                    d,
                    config.expansion,
                    config.activation,
                    seed,
                )?)
            };
            let norm1 = LayerNorm::new(&mut store, &format!("{p}.norm1"), d, config.layer_norm_eps)?;
            let norm2 = LayerNorm::new(&mut store, &format!("{p}.norm2"), d, config.layer_norm_eps)?;
            blocks.push(Block {
                axis,
                attention,
                ffn,
                norm1,
                norm2,
            });
        }
        let head = Linear::new(
            &mut store,
            "head",
            config.t_in * d,
            config.t_out * config.channels,
            seed,
        )?;
        let spd = graph.shortest_path_matrix();
        Ok(Self {
            config,
            graph,
            spd,
            store,
            temporal,
            degree,
            fusion,
            sa_bias,
            blocks,
            head,
            normalizer: None,
        })
    }

    pub fn config(&self) -> &StgormerConfig {
        &self.config
    }

    pub fn graph(&self) -> &Arc<SpatioTemporalGraph> {
        &self.graph
    }

    pub fn spd(&self) -> &SpdMatrix {
        &self.spd
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn temporal_encoding(&self) -> Option<&TemporalEncoding> {
        self.temporal.as_ref()
    }

    pub fn degree_embedding(&self) -> Option<&DegreeEmbedding> {
        self.degree.as_ref()
    }

    pub fn fusion(&self) -> &FusionLayer {
        &self.fusion
    }

    pub fn sa_bias_table(&self) -> Option<&SpdBiasTable> {
        self.sa_bias.as_ref()
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b.ffn, FeedForward::Moe(_)))
            .count()
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    pub fn set_normalizer(&mut self, normalizer: Option<Normalizer>) {
        self.normalizer = normalizer;
    }

    /// Same parameters over a different graph with the same node count.
    pub fn with_graph(&self, graph: Arc<SpatioTemporalGraph>) -> Result<Self> {
        if graph.num_nodes() != self.graph.num_nodes() {
            return Err(Error::Graph(format!(
                "model expects {} nodes, graph has {}",
                self.graph.num_nodes(),
                graph.num_nodes()
            )));
        }
        let mut out = self.clone();
        out.spd = graph.shortest_path_matrix();
        out.graph = graph;
        Ok(out)
    }

    fn check_inputs(&self, x: &[usize], ts: &[usize]) -> Result<usize> {
        let c = &self.config;
        let n = self.graph.num_nodes();
        let [b, t, nn, ch] = *x else {
            return Err(Error::shape(format!("input must be [B, T_in, N, C], got {x:?}")));
        };
        if t != c.t_in || nn != n || ch != c.channels {
            return Err(Error::shape(format!(
                "input {x:?} does not match [B, {}, {n}, {}]",
                c.t_in, c.channels
            )));
        }
        match *ts {
            [tb, tt, _] if tb == b && tt == t => {}
            _ => {
                return Err(Error::shape(format!(
                    "timestamps {ts:?} do not cover the {t} input steps of {b} samples"
                )))
            }
        }
        if c.use_t_in && ts[2] != c.temporal_features {
            return Err(Error::shape(format!(
                "timestamps carry {} features, config expects {}",
                ts[2], c.temporal_features
            )));
        }
        Ok(b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let mask = NdArray::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }

    /// Inference forward: `x: [B, T_in, N, C]`, `ts: [B, T_in, k]`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, ts: Var) -> Result<ForwardOutput> {
        self.forward_impl(&self.store, tape, x, ts, None)
    }

    /// Training forward; dropout masks are drawn from `rng` when the rate is non-zero.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        x: Var,
        ts: Var,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        self.forward_impl(&self.store, tape, x, ts, Some(rng))
    }

    fn forward_impl(
        &self,
        store: &ParameterStore,
        tape: &mut Tape,
        x: Var,
        ts: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let b = self.check_inputs(tape.shape(x), tape.shape(ts))?;
        let t_enc = match &self.temporal {
            Some(enc) => Some(enc.forward(tape, store, ts)?),
            None => None,
        };
        let s_enc = match &self.degree {
            Some(emb) => Some(emb.forward(tape, store, &self.graph)?),
            None => None,
        };
        let mut h = self.fusion.forward(tape, store, x, t_enc, s_enc)?;
        // One gather node shared by every spatial block.
        let bias = match &self.sa_bias {
            Some(table) => Some(table.forward(tape, store, &self.spd)?),
            None => None,
        };

        let mut out = ForwardOutput {
            prediction: h,
            fractions: Vec::new(),
            gate_weights: Vec::new(),
            trace: Vec::with_capacity(self.blocks.len()),
        };
        for block in &self.blocks {
            let a = match block.axis {
                Axis::Spatial => spatial_attention(tape, store, &block.attention, h, bias)?,
                Axis::Temporal => temporal_attention(tape, store, &block.attention, h)?,
            };
            let a = self.dropout(tape, a, &mut rng)?;
            let u = tape.add(h, a)?;
            let u = block.norm1.forward(tape, store, u)?;
            let f = match &block.ffn {
                FeedForward::Moe(moe) => {
                    let o = moe.forward(tape, store, u)?;
                    out.fractions.push(o.fractions);
                    out.gate_weights.push(o.weights);
                    o.output
                }
                FeedForward::Plain(ffn) => ffn.forward(tape, store, u)?,
            };
            let f = self.dropout(tape, f, &mut rng)?;
            let v = tape.add(u, f)?;
            h = block.norm2.forward(tape, store, v)?;
            out.trace.push(block.axis);
        }

        let c = &self.config;
        let n = self.graph.num_nodes();
        let y = tape.permute(h, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[b, n, c.t_in * c.hidden])?;
        let y = self.head.forward(tape, store, y)?;
        let y = tape.reshape(y, &[b, n, c.t_out, c.channels])?;
        out.prediction = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(out)
    }

    /// `mean|Ŷ − Y| + α·L_lb`, with `L_lb` averaged over MoE layers.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, target: Var) -> Result<LossParts> {
        if tape.shape(out.prediction) != tape.shape(target) {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                tape.shape(out.prediction),
                tape.shape(target)
            )));
        }
        let diff = tape.sub(out.prediction, target)?;
        let abs = tape.abs(diff);
        let mae = tape.mean(abs);
        let lb = load_balance_var(tape, &out.fractions)?;
        let total = match lb {
            Some(lb) if self.config.alpha != 0.0 => {
                let w = tape.scale(lb, self.config.alpha);
                tape.add(mae, w)?
            }
            _ => mae,
        };
        Ok(LossParts { total, mae, lb })
    }

    /// Compares backpropagated gradients of the training loss on one batch
    /// against central finite differences over the model's parameters.
    pub fn gradient_check(
        &self,
        x: &NdArray,
        ts: &NdArray,
        target: &NdArray,
        options: GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let run = |store: &ParameterStore| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let tv = tape.constant(ts.clone());
            let yv = tape.constant(target.clone());
            let out = self.forward_impl(store, &mut tape, xv, tv, None)?;
            let loss = self.loss(&mut tape, &out, yv)?;
            Ok((tape, loss.total))
        };
        let mut store = self.store.clone();
        store.zero_grads();
        let (tape, loss) = run(&store)?;
        tape.backward(loss, &mut store)?;
        finite_difference_check(
            |s| {
                let (tape, loss) = run(s)?;
                tape.value(loss).item()
            },
            &mut store,
            options,
        )
    }

    /// Batched forward on values: `[B, T_in, N, C]`, `[B, T_in, k]` to `[B, T_out, N, C]`.
    /// Gate statistics are added to `state` when given.
    pub fn forward_batch(
        &self,
        x: &NdArray,
        ts: &NdArray,
        state: Option<&mut MoeState>,
    ) -> Result<NdArray> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tv = tape.constant(ts.clone());
        let out = self.forward_tape(&mut tape, xv, tv)?;
        if let Some(state) = state {
            for (layer, &w) in out.gate_weights.iter().enumerate() {
                state.record(layer, tape.value(w));
            }
        }
        Ok(tape.value(out.prediction).clone())
    }

    /// Single window on the model's (normalized) scale: `[T_in, N, C]`, `[T_in, k]` to `[T_out, N, C]`.
    pub fn forward(&self, x: &NdArray, ts: &NdArray) -> Result<NdArray> {
        let xb = with_batch_axis(x)?;
        let tb = with_batch_axis(ts)?;
        let y = self.forward_batch(&xb, &tb, None)?;
        let shape = y.shape()[1..].to_vec();
        y.reshape(&shape)
    }

    /// Forecast on the original scale: normalize the window, run forward, invert.
    pub fn predict(&self, window: &NdArray, ts: &NdArray) -> Result<NdArray> {
        let norm = self
            .normalizer
            .as_ref()
            .ok_or_else(|| Error::Data("model has no normalizer attached".into()))?;
        let y = self.forward(&norm.apply(window)?, ts)?;
        norm.invert(&y)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        let entries = self.config.entries();
        writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
        writeln!(w, "[config {}]", entries.len()).map_err(io)?;
        for (k, v) in entries {
            writeln!(w, "{k} = {v}").map_err(io)?;
        }
        let graph = self.graph.to_edge_list();
        writeln!(w, "[graph {}]", graph.lines().count()).map_err(io)?;
        w.write_all(graph.as_bytes()).map_err(io)?;
        match &self.normalizer {
            Some(n) => {
                writeln!(w, "[normalizer 2]").map_err(io)?;
                writeln!(w, "mean = {}", join_floats(&n.mean)).map_err(io)?;
                writeln!(w, "std = {}", join_floats(&n.std)).map_err(io)?;
            }
            None => writeln!(w, "[normalizer 0]").map_err(io)?,
        }
        writeln!(w, "[params]").map_err(io)?;
        self.store.write_checkpoint(w).map_err(io)
    }

    /// Rebuilds the model from the stored config and graph, verifies that the
    /// stored parameter layout matches, then restores the values.
    pub fn read_checkpoint(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let mut next = |r: &mut dyn BufRead| -> Result<String> {
            line.clear();
            let n = r
                .read_line(&mut line)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            if n == 0 {
                return Err(Error::Checkpoint("unexpected end of file".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        if next(r)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let section = |header: String, name: &str| -> Result<usize> {
            header
                .strip_prefix(&format!("[{name} "))
                .and_then(|s| s.strip_suffix(']'))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("expected [{name} <lines>], got {header:?}")))
        };

        let mut config = StgormerConfig::default();
        let count = section(next(r)?, "config")?;
        for _ in 0..count {
            let l = next(r)?;
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed config line {l:?}")))?;
            config.set(k, v).map_err(Error::Checkpoint)?;
        }

        let count = section(next(r)?, "graph")?;
        let mut graph_text = String::new();
        for _ in 0..count {
            graph_text.push_str(&next(r)?);
            graph_text.push('\n');
        }
        let graph = SpatioTemporalGraph::parse(&graph_text, "<checkpoint graph>")?;

        let count = section(next(r)?, "normalizer")?;
        let normalizer = match count {
            0 => None,
            2 => {
                let mut field = |name: &str| -> Result<Vec<f64>> {
                    let l = next(r)?;
                    let v = l
                        .strip_prefix(&format!("{name} = "))
                        .ok_or_else(|| Error::Checkpoint(format!("expected {name}, got {l:?}")))?;
                    v.split(',')
                        .map(|s| s.parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
                        .collect()
                };
                let mean = field("mean")?;
                let std = field("std")?;
                Some(Normalizer::new(mean, std)?)
            }
            other => return Err(Error::Checkpoint(format!("normalizer section of {other} lines"))),
        };
        if next(r)? != "[params]" {
            return Err(Error::Checkpoint("missing [params] section".into()));
        }
        let stored = ParameterStore::read_checkpoint(r)?;

        let mut model = Self::build(config, Arc::new(graph))?;
        if stored.manifest() != model.store.manifest() {
            return Err(Error::Checkpoint(
                "parameter layout does not match the stored config".into(),
            ));
        }
        model.store = stored;
        model.normalizer = normalizer;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        Ok(buf)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

pub(crate) fn with_batch_axis(x: &NdArray) -> Result<NdArray> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape)
}

/// Loss on concrete values, with gate statistics from `state` (absent when MoE is off).
pub fn loss_values(
    prediction: &NdArray,
    target: &NdArray,
    state: Option<&MoeState>,
    alpha: f64,
) -> Result<LossValues> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.len().max(1) as f64;
    let mae = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / n;
    let lb = match state {
        Some(s) if !s.layers.is_empty() => s.load_balance_loss()?,
        _ => 0.0,
    };
    Ok(LossValues {
        total: mae + alpha * lb,
        mae,
        lb,
    })
}

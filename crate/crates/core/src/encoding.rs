//! Spatio-temporal input encoding: Time2Vec over calendar features, degree
//! centrality embeddings, and the fused projection into the hidden width.
//!
//! Every temporal feature gets its own Time2Vec parameters; the encodings are
//! concatenated with the raw flows and projected by one fully connected layer.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::graph::SpatioTemporalGraph;
use crate::numerics::{Init, NdArray, ParamId, ParameterStore, Tape, Var};

/// `out[0] = w[0]·t + b[0]`, `out[i] = sin(w[i]·t + b[i])` for `i ≥ 1`.
pub fn time2vec(t: f64, w: &[f64], b: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&wi, &bi))| {
            let z = t * wi + bi;
            if i == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect()
}

/// Learnable Time2Vec parameters for one scalar temporal feature.
#[derive(Debug, Clone)]
pub struct Time2Vec {
    pub w: ParamId,
    pub b: ParamId,
    dim: usize,
}

impl Time2Vec {
    /// Periodic dimensions start as a Fourier basis over `[0, 1)`:
    /// alternating sine and cosine phases at integer harmonics.
    pub fn new(store: &mut ParameterStore, prefix: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config(vec![format!("{prefix}: Time2Vec width must be ≥ 1")]));
        }
        let w0: Vec<f64> = (0..dim)
            .map(|i| if i == 0 { 1.0 } else { 2.0 * PI * i.div_ceil(2) as f64 })
            .collect();
        let b0: Vec<f64> = (0..dim)
            .map(|i| if i > 0 && i % 2 == 0 { FRAC_PI_2 } else { 0.0 })
            .collect();
        let w = store.insert(format!("{prefix}.w"), NdArray::from_vec(w0))?;
        let b = store.insert(format!("{prefix}.b"), NdArray::from_vec(b0))?;
        Ok(Self { w, b, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `t` has a trailing extent of 1; the output replaces it with `dim`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, t: Var) -> Result<Var> {
        let mut shape = tape.shape(t).to_vec();
        if shape.last() != Some(&1) {
            return Err(Error::shape(format!("time2vec input {shape:?} needs trailing 1")));
        }
        *shape.last_mut().unwrap() = self.dim;
        let t = tape.broadcast_to(t, &shape)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.mul_bcast(t, w)?;
        let z = tape.add_bcast(z, b)?;
        if self.dim == 1 {
            return Ok(z);
        }
        let lin = tape.narrow(z, 0, 1)?;
        let per = tape.narrow(z, 1, self.dim - 1)?;
        let per = tape.sin(per);
        tape.concat(&[lin, per])
    }
}

/// Time2Vec encodings of all temporal features, concatenated.
#[derive(Debug, Clone)]
pub struct TemporalEncoding {
    features: Vec<Time2Vec>,
}

impl TemporalEncoding {
    pub fn new(store: &mut ParameterStore, prefix: &str, features: usize, dim: usize) -> Result<Self> {
        let features = (0..features)
            .map(|f| Time2Vec::new(store, &format!("{prefix}.feature{f}"), dim))
            .collect::<Result<_>>()?;
        Ok(Self { features })
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn width(&self) -> usize {
        self.features.iter().map(Time2Vec::dim).sum()
    }

    pub fn features(&self) -> &[Time2Vec] {
        &self.features
    }

    /// `[..., k]` temporal features to `[..., k·d_t]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, ts: Var) -> Result<Var> {
        let k = tape.value(ts).last_dim();
        if tape.shape(ts).is_empty() || k != self.features.len() {
            return Err(Error::shape(format!(
                "expected {} temporal features, got shape {:?}",
                self.features.len(),
                tape.shape(ts)
            )));
        }
        let mut parts = Vec::with_capacity(k);
        for (f, t2v) in self.features.iter().enumerate() {
            let col = tape.narrow(ts, f, 1)?;
            parts.push(t2v.forward(tape, store, col)?);
        }
        tape.concat(&parts)
    }
}

/// `[T, k]` timestamps to `[T, k·d_t]`, evaluated from the store's parameters.
pub fn temporal_input_encoding(
    timestamps: &NdArray,
    enc: &TemporalEncoding,
    store: &ParameterStore,
) -> Result<NdArray> {
    let mut tape = Tape::new();
    let ts = tape.constant(timestamps.clone());
    let out = enc.forward(&mut tape, store, ts)?;
    Ok(tape.value(out).clone())
}

/// In/out-degree embedding tables with a shared overflow row at
/// `max_degree + 1`.
#[derive(Debug, Clone)]
pub struct DegreeEmbedding {
    pub z_minus: ParamId,
    pub z_plus: ParamId,
    max_degree: usize,
    dim: usize,
}

impl DegreeEmbedding {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        max_degree: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let rows = max_degree + 2;
        let z_minus = store.init(&format!("{prefix}.in"), &[rows, dim], Init::Normal(0.02), seed)?;
        let z_plus = store.init(&format!("{prefix}.out"), &[rows, dim], Init::Normal(0.02), seed)?;
        Ok(Self {
            z_minus,
            z_plus,
            max_degree,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Table row used for a node of the given degree.
    pub fn bucket(&self, degree: usize) -> usize {
        degree.min(self.max_degree + 1)
    }

    /// `[N, d]`: `z⁻[indeg(v)] + z⁺[outdeg(v)]` per node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        graph: &SpatioTemporalGraph,
    ) -> Result<Var> {
        let (indeg, outdeg) = graph.degrees();
        let n = graph.num_nodes();
        let in_idx: Vec<usize> = indeg.iter().map(|&d| self.bucket(d)).collect();
        let out_idx: Vec<usize> = outdeg.iter().map(|&d| self.bucket(d)).collect();
        let zm = tape.param(store, self.z_minus);
        let zp = tape.param(store, self.z_plus);
        let a = tape.gather(zm, &in_idx, &[n])?;
        let b = tape.gather(zp, &out_idx, &[n])?;
        tape.add(a, b)
    }
}

/// `[N, d]` spatial encoding evaluated from the store's parameters.
pub fn spatial_input_encoding(
    graph: &SpatioTemporalGraph,
    tables: &DegreeEmbedding,
    store: &ParameterStore,
) -> Result<NdArray> {
    let mut tape = Tape::new();
    let v = tables.forward(&mut tape, store, graph)?;
    Ok(tape.value(v).clone())
}

/// Projection of `X ‖ t_in ‖ s_in` into the hidden width.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    in_width: usize,
}

impl FusionLayer {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        in_width: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let weight = store.init(
            &format!("{prefix}.weight"),
            &[in_width, hidden],
            Init::FanIn(in_width),
            seed,
        )?;
        let bias = store.init(&format!("{prefix}.bias"), &[hidden], Init::Zeros, seed)?;
        Ok(Self {
            weight,
            bias,
            in_width,
        })
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    /// `x: [B, T, N, C]`, `t_enc: [B, T, k·d_t]`, `s_enc: [N, d]` → `[B, T, N, D]`.
    /// Disabled encodings are passed as `None` and omitted from the concatenation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        t_enc: Option<Var>,
        s_enc: Option<Var>,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("fusion input must be [B, T, N, C], got {xs:?}")));
        }
        let (b, t, n) = (xs[0], xs[1], xs[2]);
        let mut parts = vec![x];
        if let Some(te) = t_enc {
            let ts = tape.shape(te).to_vec();
            if ts.len() != 3 || ts[0] != b || ts[1] != t {
                return Err(Error::shape(format!(
                    "temporal encoding {ts:?} does not match input {xs:?}"
                )));
            }
            let te = tape.reshape(te, &[b, t, 1, ts[2]])?;
            parts.push(tape.broadcast_to(te, &[b, t, n, ts[2]])?);
        }
        if let Some(se) = s_enc {
            let ss = tape.shape(se).to_vec();
            if ss.len() != 2 || ss[0] != n {
                return Err(Error::shape(format!(
                    "spatial encoding {ss:?} does not match {n} nodes"
                )));
            }
            let se = tape.reshape(se, &[1, 1, n, ss[1]])?;
            parts.push(tape.broadcast_to(se, &[b, t, n, ss[1]])?);
        }
        let cat = tape.concat(&parts)?;
        let width = tape.value(cat).last_dim();
        if width != self.in_width {
            return Err(Error::shape(format!(
                "fused width {width} does not match projection input {}",
                self.in_width
            )));
        }
        let w = tape.param(store, self.weight);
        let bias = tape.param(store, self.bias);
        tape.linear(cat, w, Some(bias))
    }
}

/// Unbatched fusion: `x: [T, N, C]`, `t_enc: [T, k·d_t]`, `s_enc: [N, d]` → `[T, N, D]`.
pub fn fuse_inputs(
    x: &NdArray,
    t_enc: Option<&NdArray>,
    s_enc: Option<&NdArray>,
    layer: &FusionLayer,
    store: &ParameterStore,
) -> Result<NdArray> {
    if x.ndim() != 3 {
        return Err(Error::shape(format!("expected [T, N, C], got {:?}", x.shape())));
    }
    let mut tape = Tape::new();
    let mut xs = vec![1];
    xs.extend_from_slice(x.shape());
    let xv = tape.constant(x.clone().reshape(&xs)?);
    let tv = match t_enc {
        Some(te) => {
            let mut s = vec![1];
            s.extend_from_slice(te.shape());
            Some(tape.constant(te.clone().reshape(&s)?))
        }
        None => None,
    };
    let sv = s_enc.map(|s| tape.constant(s.clone()));
    let h = layer.forward(&mut tape, store, xv, tv, sv)?;
    let out = tape.value(h).clone();
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
}

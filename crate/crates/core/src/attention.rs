//! Multi-head self-attention along the temporal or spatial axis, with the
//! learnable shortest-path bias on spatial scores.
//!
//! Hidden states are laid out `[B, T, N, D]`. Temporal attention treats every
//! (sample, node) pair as an independent sequence over time; spatial attention
//! treats every (sample, step) pair as an independent set of nodes.

use crate::error::{Error, Result};
use crate::graph::{SpdMatrix, UNREACHABLE};
use crate::layers::Linear;
use crate::numerics::{Init, NdArray, ParamId, ParameterStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
    dim: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(vec![format!(
                "hidden width {dim} is not divisible by {heads} heads"
            )]));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{prefix}.q"), dim, dim, seed)?,
            key: Linear::new(store, &format!("{prefix}.k"), dim, dim, seed)?,
            value: Linear::new(store, &format!("{prefix}.v"), dim, dim, seed)?,
            output: Linear::new(store, &format!("{prefix}.o"), dim, dim, seed)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `h: [B, L, D]`, optional `bias: [L, L]` added to every head's scores.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, h, bias)?.0)
    }

    /// Like [`AttentionParams::forward`], also returning the attention weights
    /// `[B·heads, L, L]` (rows index queries).
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let hs = tape.shape(h).to_vec();
        if hs.len() != 3 || hs[2] != self.dim {
            return Err(Error::shape(format!(
                "attention input must be [B, L, {}], got {hs:?}",
                self.dim
            )));
        }
        let (b, l) = (hs[0], hs[1]);
        if let Some(bias) = bias {
            if tape.shape(bias) != [l, l] {
                return Err(Error::shape(format!(
                    "attention bias {:?} for sequence length {l}",
                    tape.shape(bias)
                )));
            }
        }
        let (nh, dh) = (self.heads, self.dim / self.heads);
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, l, nh, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * nh, l, dh])
        };
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(bias) = bias {
            scores = tape.add_bcast(scores, bias)?;
        }
        let weights = tape.softmax(scores);
        let ctx = tape.batch_matmul(weights, v, false)?;
        let ctx = tape.reshape(ctx, &[b, nh, l, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, self.dim])?;
        Ok((self.output.forward(tape, store, ctx)?, weights))
    }
}

/// Evaluates attention on concrete values: `h: [B, L, D]`, `bias: [L, L]`.
pub fn scaled_dot_attention(
    h: &NdArray,
    params: &AttentionParams,
    store: &ParameterStore,
    bias: Option<&NdArray>,
) -> Result<NdArray> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let out = params.forward(&mut tape, store, hv, bv)?;
    Ok(tape.value(out).clone())
}

fn check_hidden(tape: &Tape, h: Var) -> Result<[usize; 4]> {
    match *tape.shape(h) {
        [b, t, n, d] => Ok([b, t, n, d]),
        ref s => Err(Error::shape(format!("hidden state must be [B, T, N, D], got {s:?}"))),
    }
}

/// Attention over time within each node: `[B, T, N, D] → [B, T, N, D]`.
pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &AttentionParams,
    h: Var,
) -> Result<Var> {
    let [b, t, n, d] = check_hidden(tape, h)?;
    let x = tape.permute(h, &[0, 2, 1, 3])?;
    let x = tape.reshape(x, &[b * n, t, d])?;
    let y = params.forward(tape, store, x, None)?;
    let y = tape.reshape(y, &[b, n, t, d])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// Attention over nodes within each step, with an optional `[N, N]` score bias.
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &AttentionParams,
    h: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let [b, t, n, d] = check_hidden(tape, h)?;
    let x = tape.reshape(h, &[b * t, n, d])?;
    let y = params.forward(tape, store, x, bias)?;
    tape.reshape(y, &[b, t, n, d])
}

/// One learnable scalar per hop-distance bucket: distances `0..=max_spd`,
/// then an overflow bucket, then the unreachable bucket.
#[derive(Debug, Clone)]
pub struct SpdBiasTable {
    pub table: ParamId,
    max_spd: usize,
}

impl SpdBiasTable {
    /// Finite buckets start near zero; the unreachable bucket starts at exactly 0.
    pub fn new(store: &mut ParameterStore, name: &str, max_spd: usize, seed: u64) -> Result<Self> {
        let table = store.init(name, &[max_spd + 3], Init::Normal(0.02), seed)?;
        store.value_mut(table).data_mut()[max_spd + 2] = 0.0;
        Ok(Self { table, max_spd })
    }

    pub fn len(&self) -> usize {
        self.max_spd + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_spd(&self) -> usize {
        self.max_spd
    }

    pub fn unreachable_bucket(&self) -> usize {
        self.max_spd + 2
    }

    pub fn bucket(&self, spd: i64) -> usize {
        spd_bucket(spd, self.max_spd)
    }

    /// `[N, N]` bias, gathered from the shared table.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, spd: &SpdMatrix) -> Result<Var> {
        let n = spd.num_nodes();
        let idx: Vec<usize> = spd.values().iter().map(|&s| self.bucket(s)).collect();
        let table = tape.param(store, self.table);
        tape.gather(table, &idx, &[n, n])
    }
}

pub fn spd_bucket(spd: i64, max_spd: usize) -> usize {
    if spd == UNREACHABLE {
        max_spd + 2
    } else if spd as usize > max_spd {
        max_spd + 1
    } else {
        spd as usize
    }
}

/// `bias[i][j] = table[bucket(spd[i][j])]` on concrete values.
pub fn spd_bias(spd: &SpdMatrix, table: &[f64]) -> Result<NdArray> {
    if table.len() < 3 {
        return Err(Error::shape("SPD bias table needs at least 3 buckets"));
    }
    let max_spd = table.len() - 3;
    let n = spd.num_nodes();
    let data = spd
        .values()
        .iter()
        .map(|&s| table[spd_bucket(s, max_spd)])
        .collect();
    NdArray::new(&[n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SpatioTemporalGraph;

    #[test]
    fn bucket_mapping() {
        assert_eq!(spd_bucket(-1, 10), 12);
        assert_eq!(spd_bucket(0, 10), 0);
        assert_eq!(spd_bucket(10, 10), 10);
        assert_eq!(spd_bucket(11, 10), 11);
    }

    #[test]
    fn unreachable_pairs_use_sentinel_bucket() {
        let g = SpatioTemporalGraph::new(3, &[(0, 1)], true).unwrap();
        let spd = g.shortest_path_matrix();
        let table = [0.0, 1.0, 2.0, 3.0, 4.0, -7.0]; // max_spd = 3
        let bias = spd_bias(&spd, &table).unwrap();
        assert_eq!(bias.at(&[0, 1]), 1.0);
        assert_eq!(bias.at(&[1, 0]), -7.0);
        assert_eq!(bias.at(&[2, 2]), 0.0);
        let zero = spd_bias(&spd, &[0.0; 6]).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParameterStore::new();
        assert!(AttentionParams::new(&mut store, "a", 6, 4, 0).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParameterStore::new();
        let p = AttentionParams::new(&mut store, "a", 4, 2, 3).unwrap();
        let h = NdArray::from_fn(&[2, 1, 4], |i| (i as f64 * 0.7).cos());
        let out = scaled_dot_attention(&h, &p, &store, None).unwrap();
        // softmax over one score is 1, so output = O(V(h))
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let v = p.value.forward(&mut tape, &store, hv).unwrap();
        let o = p.output.forward(&mut tape, &store, v).unwrap();
        assert!(out.max_abs_diff(tape.value(o)) < 1e-14);
    }
}

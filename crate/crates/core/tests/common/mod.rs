#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgormer::graph::SpatioTemporalGraph;
use stgormer::model::{StgormerConfig, StgormerModel};
use stgormer::numerics::NdArray;

/// The small configuration used for full-model gradient checks.
pub fn gradcheck_config() -> StgormerConfig {
    StgormerConfig {
        hidden: 8,
        heads: 2,
        block_order: "ST".into(),
        experts: 3,
        expansion: 2,
        time2vec_dim: 3,
        degree_dim: 4,
        max_degree: 4,
        max_spd: 4,
        t_in: 8,
        t_out: 1,
        ..Default::default()
    }
}

/// A desk-scale configuration with every component enabled.
pub fn small_config() -> StgormerConfig {
    StgormerConfig {
        hidden: 8,
        heads: 2,
        block_order: "SSTT".into(),
        experts: 3,
        expansion: 2,
        time2vec_dim: 4,
        degree_dim: 4,
        max_degree: 4,
        max_spd: 3,
        t_in: 6,
        t_out: 2,
        ..Default::default()
    }
}

/// A directed graph with uneven degrees, a long path and an isolated node,
/// so every encoding bucket kind shows up.
pub fn irregular_graph(n: usize) -> Arc<SpatioTemporalGraph> {
    assert!(n >= 4);
    let mut edges = vec![];
    for v in 0..n - 2 {
        edges.push((v, v + 1));
    }
    edges.push((0, 2));
    edges.push((2, 0));
    edges.push((n - 2, 1));
    Arc::new(SpatioTemporalGraph::new(n, &edges, true).unwrap())
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, directed: bool) -> SpatioTemporalGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let ok = if directed { u != v } else { u < v };
            if ok && rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    SpatioTemporalGraph::new(n, &edges, directed).unwrap()
}

pub struct Inputs {
    pub x: NdArray,
    pub ts: NdArray,
    pub y: NdArray,
}

/// Batched random inputs `[B, T_in, N, C]`, timestamps `[B, T_in, k]` and targets.
pub fn random_inputs(cfg: &StgormerConfig, n: usize, batch: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = NdArray::from_fn(&[batch, cfg.t_in, n, cfg.channels], |_| rng.random_range(-1.5..1.5));
    let ts = NdArray::from_fn(&[batch, cfg.t_in, cfg.temporal_features], |_| rng.random_range(0.0..1.0));
    let y = NdArray::from_fn(&[batch, cfg.t_out, n, cfg.channels], |_| rng.random_range(-1.5..1.5));
    Inputs { x, ts, y }
}

pub fn build(cfg: StgormerConfig, graph: Arc<SpatioTemporalGraph>) -> StgormerModel {
    StgormerModel::build(cfg, graph).unwrap()
}

/// Moves node `i` to position `perm[i]` along `axis`.
pub fn permute_nodes(x: &NdArray, axis: usize, perm: &[usize]) -> NdArray {
    let shape = x.shape().to_vec();
    let strides = NdArray::strides(&shape);
    let mut out = NdArray::zeros(&shape);
    for (flat, &v) in x.data().iter().enumerate() {
        let node = (flat / strides[axis]) % shape[axis];
        let target = flat - node * strides[axis] + perm[node] * strides[axis];
        out.data_mut()[target] = v;
    }
    out
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

pub fn max_rel_dev(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.max_abs_diff(b) / scale
}

/// Copies every parameter present under the same name in both models from `src` to `dst`.
pub fn copy_shared_params(src: &StgormerModel, dst: &mut StgormerModel) -> usize {
    let mut copied = 0;
    let names: Vec<String> = dst.store().names().to_vec();
    for name in names {
        if let Some(v) = src.store().get(&name) {
            if v.shape() == dst.store().get(&name).unwrap().shape() {
                dst.store_mut().set(&name, v.clone()).unwrap();
                copied += 1;
            }
        }
    }
    copied
}

/// Embeds an ablated model's fusion weight into a full model's, with zero rows
/// for the inputs the ablated model lacks.
pub fn embed_fusion_rows(ablated: &StgormerModel, full: &mut StgormerModel, keep: &[bool]) {
    let small = ablated.store().get("encoding.fusion.weight").unwrap().clone();
    let big_shape = full.store().get("encoding.fusion.weight").unwrap().shape().to_vec();
    assert_eq!(keep.len(), big_shape[0]);
    let d = big_shape[1];
    let mut big = NdArray::zeros(&big_shape);
    let mut src_row = 0;
    for (row, &k) in keep.iter().enumerate() {
        if k {
            big.data_mut()[row * d..(row + 1) * d].copy_from_slice(&small.data()[src_row * d..(src_row + 1) * d]);
            src_row += 1;
        }
    }
    assert_eq!(src_row, small.shape()[0]);
    full.store_mut().set("encoding.fusion.weight", big).unwrap();
}

//! How the shortest-path bias reshapes spatial attention: the same queries and keys,
//! attended with and without a bias that favours near neighbours.
//!
//! cargo run --release --example attention_bias

use stgormer::attention::{scaled_dot_attention, spd_bias, AttentionParams};
use stgormer::graph::SpatioTemporalGraph;
use stgormer::numerics::{NdArray, ParameterStore, Tape};

fn weights(h: &NdArray, params: &AttentionParams, store: &ParameterStore, bias: Option<&NdArray>) -> NdArray {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let (_, w) = params.forward_with_weights(&mut tape, store, hv, bv).unwrap();
    tape.value(w).clone()
}

fn main() -> stgormer::Result<()> {
    let n = 6;
    let g = SpatioTemporalGraph::new(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], false)?;
    let spd = g.shortest_path_matrix();
    // bucket k holds the bias for k hops; the last two are "farther" and "unreachable"
    let table = [2.0, 1.0, 0.0, -1.0, -2.0, -3.0, -1e9];
    let bias = spd_bias(&spd, &table)?;

    let mut store = ParameterStore::new();
    let params = AttentionParams::new(&mut store, "attn", 8, 2, 1)?;
    let h = NdArray::from_fn(&[1, n, 8], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    let plain = weights(&h, &params, &store, None);
    let biased = weights(&h, &params, &store, Some(&bias));

    println!("attention of node 0 over the path graph (head 0)");
    println!("node hops  plain  biased");
    for j in 0..n {
        println!("{j:>4} {:>4} {:>6.3} {:>7.3}", spd.get(0, j), plain.at(&[0, 0, j]), biased.at(&[0, 0, j]));
    }
    let out = scaled_dot_attention(&h, &params, &store, Some(&bias))?;
    println!("output shape {:?}", out.shape());
    Ok(())
}

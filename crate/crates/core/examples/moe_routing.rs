//! Soft routing through a mixture of expert feed-forward networks and the
//! load-balancing penalty it reports.
//!
//! cargo run --release --example moe_routing

use stgormer::moe::{
    gate, load_balance_from_fractions, load_balance_loss, moe_forward, Activation, Axis, ExpertFnn,
    MoeLayer, MoeState, Router,
};
use stgormer::numerics::{NdArray, ParameterStore};

fn main() -> stgormer::Result<()> {
    let (dim, experts) = (8, 4);
    let mut store = ParameterStore::new();
    let router = Router::new(&mut store, "router", dim, experts, 1, Axis::Spatial, 3)?;
    let ffns = (0..experts)
        .map(|e| ExpertFnn::new(&mut store, &format!("expert{e}"), dim, 2, Activation::Relu, e as u64))
        .collect::<stgormer::Result<Vec<_>>>()?;
    let layer = MoeLayer::new(router, ffns)?;

    let h = NdArray::from_fn(&[4, 5, dim], |i| ((i * 13 % 17) as f64 - 8.0) / 4.0);
    let w = gate(&h, &layer.router, &store)?;
    println!("gate weights of the first three tokens:");
    for tok in w.data().chunks(experts).take(3) {
        let row: Vec<String> = tok.iter().map(|p| format!("{p:.3}")).collect();
        println!("  [{}]", row.join(", "));
    }

    let mut state = MoeState::new();
    let out = moe_forward(&h, &layer, &store, &mut state, 0)?;
    println!("output shape {:?}", out.shape());
    println!("load-balance loss {:.5}", load_balance_loss(&state)?);
    let e = experts as f64;
    println!("bounds: uniform {:.5}, collapsed {:.5}", 1.0 / (e * e), load_balance_from_fractions(&[1.0, 0.0, 0.0, 0.0]));
    Ok(())
}

//! Compare backpropagated gradients of the full model against central finite differences.
//!
//! cargo run --release --example gradient_check

use std::sync::Arc;

use stgormer::graph::SpatioTemporalGraph;
use stgormer::model::{StgormerConfig, StgormerModel};
use stgormer::numerics::{GradCheckOptions, NdArray};

fn main() -> stgormer::Result<()> {
    let cfg = StgormerConfig {
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
        ..Default::default()
    };
    let n = 6;
    let g = SpatioTemporalGraph::new(n, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 0), (4, 1)], true)?;
    let model = StgormerModel::build(cfg.clone(), Arc::new(g))?;
    let wave = |i: usize| (i as f64 * 0.37).sin();
    let x = NdArray::from_fn(&[2, cfg.t_in, n, 1], wave);
    let ts = NdArray::from_fn(&[2, cfg.t_in, 2], |i| (i as f64 * 0.05).fract());
    let y = NdArray::from_fn(&[2, 1, n, 1], |i| wave(i + 3));

    let report = model.gradient_check(&x, &ts, &y, GradCheckOptions { max_coords: 300, ..Default::default() })?;
    println!("{} parameters, {} coordinates checked", model.num_parameters(), report.checked);
    println!("max relative error {:.3e}", report.max_rel_error);
    if let Some(w) = report.worst {
        println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.param, w.offset, w.analytic, w.numeric);
    }
    Ok(())
}

//! Degree and shortest-path structure of a small road graph, and the spatial input
//! encoding built from it.
//!
//! cargo run --release --example graph_encodings

use stgormer::encoding::{spatial_input_encoding, DegreeEmbedding};
use stgormer::graph::SpatioTemporalGraph;
use stgormer::numerics::ParameterStore;

fn main() -> stgormer::Result<()> {
    // a one-way loop 0→1→2→3→0 with a spur 2→4 and an isolated node 5
    let g = SpatioTemporalGraph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 0), (2, 4)], true)?;
    let (indeg, outdeg) = g.degrees();
    println!("node  in  out");
    for v in 0..g.num_nodes() {
        println!("{v:>4} {:>3} {:>4}", indeg[v], outdeg[v]);
    }

    let spd = g.shortest_path_matrix();
    println!("\nshortest-path hops (-1 = unreachable)");
    for i in 0..g.num_nodes() {
        let row: Vec<String> = (0..g.num_nodes()).map(|j| format!("{:>3}", spd.get(i, j))).collect();
        println!("{}", row.join(""));
    }

    let mut store = ParameterStore::new();
    let tables = DegreeEmbedding::new(&mut store, "degree", 4, 3, 0)?;
    let s_in = spatial_input_encoding(&g, &tables, &store)?;
    println!("\nspatial encoding, one row per node:");
    for v in 0..g.num_nodes() {
        let row: Vec<String> = (0..3).map(|j| format!("{:+.4}", s_in.at(&[v, j]))).collect();
        println!("  {v}: {}", row.join(" "));
    }
    Ok(())
}

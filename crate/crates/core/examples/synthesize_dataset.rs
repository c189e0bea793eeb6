//! Generate a small synthetic traffic dataset, write it to disk and read it back.
//!
//! cargo run --release --example synthesize_dataset -- [out_dir]

use stgormer::data::{load_dataset, save_dataset, split, synthesize, SyntheticSpec, SPLIT_RATIOS};

fn main() -> stgormer::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_data".into());
    let spec = SyntheticSpec { nodes: 8, steps: 4 * 168, ..Default::default() };
    let ds = synthesize(&spec)?;
    save_dataset(&out, &ds)?;
    let back = load_dataset(&out)?;
    assert_eq!(back.flows(), ds.flows());

    println!("{} steps, {} nodes, {} edges", ds.num_steps(), ds.num_nodes(), ds.graph().edges().len());
    let parts = split(&ds, SPLIT_RATIOS)?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        println!("{name:>5}: steps {}..{}", part.start_step(), part.start_step() + part.num_steps());
    }
    println!("first day at node 0:");
    for t in 0..spec.daily_period {
        let v = ds.flows().at(&[t, 0, 0]);
        println!("  t={t:>2} {v:6.3} {}", "#".repeat((v * 8.0) as usize));
    }
    Ok(())
}

//! Save a trained model, load it back and confirm the evaluation report is unchanged.
//!
//! cargo run --release --example checkpoint_roundtrip

use stgormer::data::{synthesize, SyntheticSpec};
use stgormer::model::{StgormerConfig, StgormerModel};
use stgormer::train::{evaluate, fit, NoObserver, RunConfig, TrainConfig};

fn main() -> stgormer::Result<()> {
    let ds = synthesize(&SyntheticSpec { nodes: 5, steps: 2 * 168, ..Default::default() })?;
    let run = RunConfig {
        model: StgormerConfig { hidden: 8, heads: 2, block_order: "ST".into(), experts: 2, ..Default::default() },
        train: TrainConfig { max_epochs: 3, ..Default::default() },
    };
    let (model, _, data) = fit(&run, &ds, &mut NoObserver)?;

    let path = std::env::temp_dir().join("stgormer_example.ckpt");
    model.save(&path)?;
    let loaded = StgormerModel::load(&path)?;

    let before = evaluate(&model, &data.raw.test, 0.0)?.to_json();
    let after = evaluate(&loaded, &data.raw.test, 0.0)?.to_json();
    println!("{} parameters, checkpoint at {}", loaded.num_parameters(), path.display());
    println!("report before save: {before}");
    println!("report after load:  {after}");
    assert_eq!(before, after);
    Ok(())
}

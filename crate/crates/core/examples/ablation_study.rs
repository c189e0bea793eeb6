//! Train the full model and its four ablations with a shared seed and print the table.
//!
//! cargo run --release --example ablation_study -- [ablation|block_count|block_order]

use stgormer::data::{synthesize, SyntheticSpec};
use stgormer::model::StgormerConfig;
use stgormer::train::{format_study_csv, run_study, RunConfig, StudyAxis, TrainConfig};

fn main() -> stgormer::Result<()> {
    let axis: StudyAxis = std::env::args().nth(1).as_deref().unwrap_or("ablation").parse()?;
    let ds = synthesize(&SyntheticSpec { nodes: 6, steps: 3 * 168, ..Default::default() })?;
    let base = RunConfig {
        model: StgormerConfig {
            hidden: 16,
            heads: 2,
            block_order: "SSTT".into(),
            experts: 3,
            expansion: 2,
            ..Default::default()
        },
        train: TrainConfig { max_epochs: 5, ..Default::default() },
    };
    let rows = run_study(&base, &ds, axis)?;
    print!("{}", format_study_csv(&rows));
    Ok(())
}

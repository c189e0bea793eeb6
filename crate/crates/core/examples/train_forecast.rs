//! Train a small model on synthetic data, evaluate it on the test split and forecast
//! one window.
//!
//! cargo run --release --example train_forecast

use std::ops::ControlFlow;

use stgormer::data::{make_windows, synthesize, SyntheticSpec};
use stgormer::model::{StgormerConfig, StgormerModel};
use stgormer::train::{evaluate, fit, EpochRecord, RunConfig, TrainConfig, TrainObserver};

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, r: &EpochRecord, _: &StgormerModel) -> ControlFlow<()> {
        println!(
            "epoch {:>2}  loss {:.4}  train mae {:.4}  val mae {:.4}  lr {:.0e}",
            r.epoch, r.train_loss, r.train_mae, r.val_mae, r.lr
        );
        ControlFlow::Continue(())
    }
}

fn main() -> stgormer::Result<()> {
    let ds = synthesize(&SyntheticSpec { nodes: 8, steps: 4 * 168, ..Default::default() })?;
    let run = RunConfig {
        model: StgormerConfig {
            hidden: 16,
            heads: 2,
            block_order: "SSTT".into(),
            experts: 4,
            ..Default::default()
        },
        train: TrainConfig { max_epochs: 15, ..Default::default() },
    };
    let (model, history, data) = fit(&run, &ds, &mut Progress)?;
    println!("best epoch {} (val mae {:.4})", history.best_epoch, history.best_val_mae);

    let report = evaluate(&model, &data.raw.test, run.train.threshold)?;
    println!("test mae {:.4}  rmse {:.4}  mape {:.2}%", report.mae, report.rmse, 100.0 * report.mape);

    let window = &make_windows(&data.raw.test, run.model.t_in, run.model.t_out, 1)?[0];
    let forecast = model.predict(&window.input, &window.input_timestamps)?;
    println!("node  forecast  actual");
    for v in 0..ds.num_nodes() {
        println!("{v:>4} {:>9.3} {:>7.3}", forecast.at(&[0, v, 0]), window.target.at(&[0, v, 0]));
    }
    Ok(())
}

//! Optimization loop with early stopping, evaluation on the original scale,
//! and the study harness that trains one model per architecture variant.

mod config;
mod study;

use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{RunConfig, TrainConfig};
pub use study::{format_study_csv, run_study, study_variants, StudyAxis, StudyRow, STUDY_CSV_HEADER};

use crate::data::{make_windows, split, FlowDataset, MetricsAccumulator, MetricsReport, Normalizer, Splits, WindowSample, SPLIT_RATIOS};
use crate::error::{Error, Result};
use crate::model::StgormerModel;
use crate::moe::MoeState;
use crate::numerics::{AdamState, NdArray, Tape};

/// A stacked mini-batch: `x [B, T_in, N, C]`, `ts [B, T_in, k]`, `y [B, T_out, N, C]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: NdArray,
    pub ts: NdArray,
    pub y: NdArray,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Stacks windows into a batch, keeping the first `features` timestamp columns.
pub fn collate(windows: &[&WindowSample], features: usize) -> Result<Batch> {
    if windows.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let inputs: Vec<NdArray> = windows.iter().map(|w| w.input.clone()).collect();
    let targets: Vec<NdArray> = windows.iter().map(|w| w.target.clone()).collect();
    let stamps = windows
        .iter()
        .map(|w| {
            let [t, k] = w.input_timestamps.shape()[..] else {
                return Err(Error::shape("window timestamps must be [T, k]"));
            };
            if features > k {
                return Err(Error::Data(format!(
                    "{features} temporal features requested, timestamps carry {k}"
                )));
            }
            let data = w
                .input_timestamps
                .data()
                .chunks_exact(k)
                .flat_map(|row| row[..features].iter().copied())
                .collect();
            NdArray::new(&[t, features], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        x: NdArray::stack(&inputs)?,
        ts: NdArray::stack(&stamps)?,
        y: NdArray::stack(&targets)?,
    })
}

/// Splits a raw dataset 7:1:2, fits the normalizer on train, and windows the
/// normalized train and validation splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub raw: Splits,
    pub normalizer: Normalizer,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
}

pub fn prepare(ds: &FlowDataset, t_in: usize, t_out: usize, stride: usize) -> Result<PreparedData> {
    let raw = split(ds, SPLIT_RATIOS)?;
    let normalizer = Normalizer::fit(&raw.train)?;
    let train = make_windows(&raw.train.normalized(&normalizer)?, t_in, t_out, stride)?;
    let val = make_windows(&raw.val.normalized(&normalizer)?, t_in, t_out, stride)?;
    Ok(PreparedData {
        raw,
        normalizer,
        train,
        val,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub mae: f64,
    pub lb: f64,
}

/// One optimizer step: forward, loss, backward, Adam update. Gate
/// probabilities of the batch are added to `gates`.
pub fn train_step(
    model: &mut StgormerModel,
    adam: &mut AdamState,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
    gates: &mut MoeState,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let ts = tape.constant(batch.ts.clone());
    let y = tape.constant(batch.y.clone());
    let out = model.forward_train(&mut tape, x, ts, rng)?;
    let parts = model.loss(&mut tape, &out, y)?;
    let step = StepOutput {
        loss: tape.value(parts.total).item()?,
        mae: tape.value(parts.mae).item()?,
        lb: match parts.lb {
            Some(lb) => tape.value(lb).item()?,
            None => 0.0,
        },
    };
    if !step.loss.is_finite() {
        return Err(Error::Numerical(format!(
            "training loss became {} (mae {}, lb {}) at step {}",
            step.loss,
            step.mae,
            step.lb,
            adam.step_count() + 1
        )));
    }
    for (layer, &w) in out.gate_weights.iter().enumerate() {
        gates.record(layer, tape.value(w));
    }
    let store = model.store_mut();
    store.zero_grads();
    tape.backward(parts.total, store)?;
    adam.step(store)?;
    Ok(step)
}

/// Mean absolute error over windows on the model's scale (no denormalization).
pub fn mean_abs_error(model: &StgormerModel, windows: &[WindowSample], batch_size: usize) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let k = model.config().temporal_features;
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let b = collate(&refs, k)?;
        let p = model.forward_batch(&b.x, &b.ts, None)?;
        sum += p.data().iter().zip(b.y.data()).map(|(a, c)| (a - c).abs()).sum::<f64>();
        count += p.len();
    }
    Ok(sum / count as f64)
}

/// Forecasts every window of a raw (unnormalized) split and computes masked
/// metrics on the original scale.
pub fn evaluate(model: &StgormerModel, split: &FlowDataset, threshold: f64) -> Result<MetricsReport> {
    let norm = model
        .normalizer()
        .ok_or_else(|| Error::Data("model has no normalizer attached".into()))?;
    if split.num_nodes() != model.graph().num_nodes() {
        return Err(Error::Data(format!(
            "data has {} nodes, checkpoint graph has {}",
            split.num_nodes(),
            model.graph().num_nodes()
        )));
    }
    let c = model.config();
    let windows = make_windows(split, c.t_in, c.t_out, 1)?;
    let mut acc = MetricsAccumulator::default();
    for chunk in windows.chunks(64) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let b = collate(&refs, c.temporal_features)?;
        let p = model.forward_batch(&norm.apply(&b.x)?, &b.ts, None)?;
        let p = norm.invert(&p)?;
        acc.add(b.y.data(), p.data(), threshold);
    }
    acc.finish(threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_mae: f64,
    pub train_lb: f64,
    pub val_mae: f64,
    pub lr: f64,
    /// Mean gate probability per expert for every MoE layer over the epoch.
    pub fractions: Vec<Vec<f64>>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
    pub total_steps: usize,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Returns the validation signal used for early stopping; defaults to the computed one.
    fn validation_signal(&mut self, _epoch: usize, computed: f64) -> f64 {
        computed
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _model: &StgormerModel) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Observer that changes nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Trains with Adam on shuffled mini-batches, validating after each epoch.
/// Stops after `patience` epochs without strict improvement of validation MAE,
/// or at `max_epochs` / `max_steps`, and restores the best epoch's parameters.
pub fn train_loop(
    model: &mut StgormerModel,
    train: &[WindowSample],
    val: &[WindowSample],
    tcfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory> {
    if let Some(e) = tcfg.validate().into_iter().next() {
        return Err(Error::Config(vec![e]));
    }
    if train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split has no windows".into()));
    }
    let k = model.config().temporal_features;
    let mut adam = AdamState::new(tcfg.adam.clone(), model.store());
    let mut order_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_d20f);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = TrainHistory {
        best_val_mae: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.store().snapshot();
    let mut since_best = 0;
    let started = Instant::now();

    'epochs: for epoch in 1..=tcfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut gates = MoeState::new();
        let (mut loss, mut mae, mut lb, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let mut steps = 0;
        let mut hit_step_cap = false;
        for idx in order.chunks(tcfg.batch_size) {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = collate(&refs, k)?;
            let s = train_step(model, &mut adam, &batch, &mut dropout_rng, &mut gates)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            let w = batch.size() as f64;
            loss += s.loss * w;
            mae += s.mae * w;
            lb += s.lb * w;
            seen += batch.size();
            steps += 1;
            history.total_steps += 1;
            if tcfg.max_steps > 0 && history.total_steps >= tcfg.max_steps {
                hit_step_cap = true;
                break;
            }
        }
        let lr = adam.lr();
        adam.end_epoch(epoch);

        let computed = mean_abs_error(model, val, tcfg.batch_size.max(64))?;
        let val_mae = observer.validation_signal(epoch, computed);
        let n = seen as f64;
        let record = EpochRecord {
            epoch,
            steps,
            train_loss: loss / n,
            train_mae: mae / n,
            train_lb: lb / n,
            val_mae,
            lr,
            fractions: if gates.layers.is_empty() {
                Vec::new()
            } else {
                gates.all_fractions()?
            },
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if val_mae < history.best_val_mae {
            history.best_val_mae = val_mae;
            history.best_epoch = epoch;
            best = model.store().snapshot();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let flow = observer.on_epoch(&record, model);
        history.records.push(record);
        if since_best >= tcfg.patience {
            history.stopped_early = true;
            break 'epochs;
        }
        if hit_step_cap || flow.is_break() {
            break 'epochs;
        }
    }
    model.store_mut().restore(&best)?;
    if let Some(dir) = &tcfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(dir.join("best.ckpt"))?;
    }
    Ok(history)
}

/// Builds, trains and attaches the normalizer: the whole pipeline on one dataset.
pub fn fit(run: &RunConfig, ds: &FlowDataset, observer: &mut dyn TrainObserver) -> Result<(StgormerModel, TrainHistory, PreparedData)> {
    run.validate()?;
    let data = prepare(ds, run.model.t_in, run.model.t_out, run.train.stride)?;
    let mut model = StgormerModel::build(run.model.clone(), ds.graph().clone())?;
    model.set_normalizer(Some(data.normalizer.clone()));
    let history = train_loop(&mut model, &data.train, &data.val, &run.train, observer)?;
    Ok((model, history, data))
}

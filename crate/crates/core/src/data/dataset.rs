use std::sync::Arc;

use super::Normalizer;
use crate::error::{Error, Result};
use crate::graph::SpatioTemporalGraph;
use crate::numerics::NdArray;

/// Flow tensor `[T, N, C]` with per-step temporal features `[T, k]`.
#[derive(Debug, Clone)]
pub struct FlowDataset {
    flows: NdArray,
    timestamps: NdArray,
    graph: Arc<SpatioTemporalGraph>,
    normalizer: Option<Normalizer>,
    start_step: usize,
}

impl FlowDataset {
    pub fn new(flows: NdArray, timestamps: NdArray, graph: Arc<SpatioTemporalGraph>) -> Result<Self> {
        let [t, n, _c] = match *flows.shape() {
            [t, n, c] => [t, n, c],
            ref s => return Err(Error::Data(format!("flows must be [T, N, C], got {s:?}"))),
        };
        match *timestamps.shape() {
            [tt, _] if tt == t => {}
            ref s => {
                return Err(Error::Data(format!(
                    "timestamps shape {s:?} does not cover {t} steps"
                )))
            }
        }
        if n != graph.num_nodes() {
            return Err(Error::Data(format!(
                "flows have {n} nodes but the graph has {}",
                graph.num_nodes()
            )));
        }
        if !flows.all_finite() || !timestamps.all_finite() {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        Ok(Self {
            flows,
            timestamps,
            graph,
            normalizer: None,
            start_step: 0,
        })
    }

    pub fn flows(&self) -> &NdArray {
        &self.flows
    }

    pub fn timestamps(&self) -> &NdArray {
        &self.timestamps
    }

    pub fn graph(&self) -> &Arc<SpatioTemporalGraph> {
        &self.graph
    }

    pub fn num_steps(&self) -> usize {
        self.flows.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.flows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.flows.shape()[2]
    }

    /// Absolute index of this dataset's first step in the source series.
    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.normalizer.as_ref()
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = Some(normalizer);
        self
    }

    /// Contiguous sub-range of steps sharing graph and normalizer.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            flows: self.flows.slice_outer(start, len)?,
            timestamps: self.timestamps.slice_outer(start, len)?,
            graph: Arc::clone(&self.graph),
            normalizer: self.normalizer.clone(),
            start_step: self.start_step + start,
        })
    }

    /// Copy with flows replaced by `normalizer.apply(flows)`.
    pub fn normalized(&self, normalizer: &Normalizer) -> Result<Self> {
        Ok(Self {
            flows: normalizer.apply(&self.flows)?,
            timestamps: self.timestamps.clone(),
            graph: Arc::clone(&self.graph),
            normalizer: Some(normalizer.clone()),
            start_step: self.start_step,
        })
    }
}

/// One supervised example: `T_in` input steps followed immediately by `T_out` target steps.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub input: NdArray,
    pub input_timestamps: NdArray,
    pub target: NdArray,
    /// Absolute step index of the first input step.
    pub start: usize,
}

/// Chronological train/validation/test split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: FlowDataset,
    pub val: FlowDataset,
    pub test: FlowDataset,
}

/// Split sizes: floor proportions for train and validation, remainder to test.
pub fn split_sizes(steps: usize, ratios: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    let total = a + b + c;
    if total == 0 {
        return Err(Error::Data("split ratios sum to zero".into()));
    }
    if steps < 10 {
        return Err(Error::Data(format!("{steps} steps is too few to split (need ≥ 10)")));
    }
    let train = steps * a / total;
    let val = steps * b / total;
    let test = steps - train - val;
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Data(format!(
            "{steps} steps with ratios {a}:{b}:{c} leaves an empty split"
        )));
    }
    Ok((train, val, test))
}

pub fn split(ds: &FlowDataset, ratios: (usize, usize, usize)) -> Result<Splits> {
    let (train, val, test) = split_sizes(ds.num_steps(), ratios)?;
    Ok(Splits {
        train: ds.slice(0, train)?,
        val: ds.slice(train, val)?,
        test: ds.slice(train + val, test)?,
    })
}

/// Number of windows `make_windows` produces.
pub fn window_count(steps: usize, t_in: usize, t_out: usize, stride: usize) -> usize {
    if stride == 0 || steps < t_in + t_out {
        0
    } else {
        (steps - t_in - t_out) / stride + 1
    }
}

pub fn make_windows(
    ds: &FlowDataset,
    t_in: usize,
    t_out: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if t_in == 0 || t_out == 0 || stride == 0 {
        return Err(Error::Data("window lengths and stride must be ≥ 1".into()));
    }
    let steps = ds.num_steps();
    if steps < t_in + t_out {
        return Err(Error::Data(format!(
            "split of {steps} steps is shorter than one window ({t_in} + {t_out})"
        )));
    }
    (0..window_count(steps, t_in, t_out, stride))
        .map(|i| {
            let s = i * stride;
            Ok(WindowSample {
                input: ds.flows.slice_outer(s, t_in)?,
                input_timestamps: ds.timestamps.slice_outer(s, t_in)?,
                target: ds.flows.slice_outer(s + t_in, t_out)?,
                start: ds.start_step + s,
            })
        })
        .collect()
}

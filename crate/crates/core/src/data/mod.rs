//! Flow datasets: file formats, chronological splits, sliding windows,
//! z-score normalization, synthetic generation and masked metrics.

mod dataset;
mod io;
mod metrics;
mod normalize;
mod synth;

pub use dataset::{
    make_windows, split, split_sizes, window_count, FlowDataset, Splits, WindowSample,
};
pub use io::{
    format_flows, format_timestamps, load_dataset, load_flows, load_timestamps, parse_flows,
    parse_timestamps, save_dataset, save_flows, save_timestamps, FLOWS_FILE, GRAPH_FILE,
    TIMESTAMPS_FILE,
};
pub use metrics::{metrics, MetricsAccumulator, MetricsReport};
pub use normalize::{fit_normalizer, Normalizer};
pub use synth::{synthesize, synthesize_with_profiles, NodeProfile, SyntheticSpec};

/// Default train:validation:test split ratio.
pub const SPLIT_RATIOS: (usize, usize, usize) = (7, 1, 2);

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FlowDataset;
use crate::error::{Error, Result};
use crate::graph::SpatioTemporalGraph;
use crate::numerics::NdArray;

/// Generator settings for a synthetic traffic-like dataset.
///
/// Each node and channel draws a base level, a daily amplitude and phase, and a
/// weekly modulation depth and phase; the clean signal is
/// `base + A·sin(2πt/P_d + φ)·(1 + ρ·sin(2πt/P_w + ψ))`, smoothed over the graph
/// for `diffusion_rounds` rounds, plus Gaussian noise of standard deviation `noise_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub edge_prob: f64,
    pub directed: bool,
    pub seed: u64,
    pub steps: usize,
    pub channels: usize,
    pub daily_period: usize,
    pub weekly_period: usize,
    pub base: (f64, f64),
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub weekly_depth: (f64, f64),
    pub diffusion_rounds: usize,
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 12,
            edge_prob: 0.3,
            directed: false,
            seed: 0,
            steps: 2016,
            channels: 1,
            daily_period: 24,
            weekly_period: 168,
            base: (2.0, 4.0),
            amplitude: (0.5, 1.5),
            phase: (0.0, TAU),
            weekly_depth: (0.0, 0.5),
            diffusion_rounds: 1,
            noise_std: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.nodes == 0 {
            errs.push("nodes: must be ≥ 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            errs.push(format!("edge_prob: {} is not a probability", self.edge_prob));
        }
        if self.steps == 0 {
            errs.push("steps: must be ≥ 1".to_string());
        }
        if self.channels == 0 {
            errs.push("channels: must be ≥ 1".to_string());
        }
        if self.daily_period == 0 {
            errs.push("daily_period: must be ≥ 1".to_string());
        } else if self.weekly_period == 0 || !self.weekly_period.is_multiple_of(self.daily_period) {
            errs.push(format!(
                "weekly_period: {} is not a positive multiple of daily_period {}",
                self.weekly_period, self.daily_period
            ));
        }
        for (name, (lo, hi)) in [
            ("base", self.base),
            ("amplitude", self.amplitude),
            ("phase", self.phase),
            ("weekly_depth", self.weekly_depth),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                errs.push(format!("{name}: range ({lo}, {hi}) is empty"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            errs.push(format!("noise_std: {} must be ≥ 0", self.noise_std));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "nodes",
        "edge_prob",
        "directed",
        "seed",
        "steps",
        "channels",
        "daily_period",
        "weekly_period",
        "base",
        "amplitude",
        "phase",
        "weekly_depth",
        "diffusion_rounds",
        "noise_std",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let range = |(lo, hi): (f64, f64)| format!("{lo:?},{hi:?}");
        Some(match key {
            "nodes" => self.nodes.to_string(),
            "edge_prob" => format!("{:?}", self.edge_prob),
            "directed" => self.directed.to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "channels" => self.channels.to_string(),
            "daily_period" => self.daily_period.to_string(),
            "weekly_period" => self.weekly_period.to_string(),
            "base" => range(self.base),
            "amplitude" => range(self.amplitude),
            "phase" => range(self.phase),
            "weekly_depth" => range(self.weekly_depth),
            "diffusion_rounds" => self.diffusion_rounds.to_string(),
            "noise_std" => format!("{:?}", self.noise_std),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.trim().parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let range = |v: &str| -> std::result::Result<(f64, f64), String> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| format!("{key}: expected \"lo,hi\", got {v:?}"))?;
            Ok((num(key, a)?, num(key, b)?))
        };
        match key {
            "nodes" => self.nodes = num(key, value)?,
            "edge_prob" => self.edge_prob = num(key, value)?,
            "directed" => self.directed = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "daily_period" => self.daily_period = num(key, value)?,
            "weekly_period" => self.weekly_period = num(key, value)?,
            "base" => self.base = range(value)?,
            "amplitude" => self.amplitude = range(value)?,
            "phase" => self.phase = range(value)?,
            "weekly_depth" => self.weekly_depth = range(value)?,
            "diffusion_rounds" => self.diffusion_rounds = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Applies `key = value` lines (`#` comments allowed), reporting every bad line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let res = match line.split_once('=') {
                Some((k, v)) => self.set(k.trim(), v.trim()),
                None => Err(format!("expected key = value, got {line:?}")),
            };
            if let Err(e) = res {
                errs.push(format!("{origin}:{}: {e}", i + 1));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Stationary mean and variance of one node/channel series with the given draws,
    /// before diffusion: `(base, A²/2·(1 + ρ²/2) + σ_n²)`.
    pub fn series_moments(&self, base: f64, amplitude: f64, depth: f64) -> (f64, f64) {
        let var = amplitude * amplitude / 2.0 * (1.0 + depth * depth / 2.0)
            + self.noise_std * self.noise_std;
        (base, var)
    }
}

/// Per node/channel draws used by [`synthesize`], indexed `[node][channel]`.
#[derive(Debug, Clone)]
pub struct NodeProfile {
    pub base: f64,
    pub amplitude: f64,
    pub daily_phase: f64,
    pub depth: f64,
    pub weekly_phase: f64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn random_graph(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SpatioTemporalGraph> {
    let n = spec.nodes;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let candidate = if spec.directed { u != v } else { u < v };
            if candidate && rng.random_bool(spec.edge_prob) {
                edges.push((u, v));
            }
        }
    }
    SpatioTemporalGraph::new(n, &edges, spec.directed)
}

/// Synthesizes the graph, node profiles and dataset; everything follows from `spec.seed`.
pub fn synthesize_with_profiles(spec: &SyntheticSpec) -> Result<(FlowDataset, Vec<Vec<NodeProfile>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let graph = random_graph(spec, &mut rng)?;
    let (n, c, steps) = (spec.nodes, spec.channels, spec.steps);
    let profiles: Vec<Vec<NodeProfile>> = (0..n)
        .map(|_| {
            (0..c)
                .map(|_| NodeProfile {
                    base: uniform(&mut rng, spec.base),
                    amplitude: uniform(&mut rng, spec.amplitude),
                    daily_phase: uniform(&mut rng, spec.phase),
                    depth: uniform(&mut rng, spec.weekly_depth),
                    weekly_phase: uniform(&mut rng, spec.phase),
                })
                .collect()
        })
        .collect();

    let (pd, pw) = (spec.daily_period as f64, spec.weekly_period as f64);
    let mut flows = vec![0.0; steps * n * c];
    for t in 0..steps {
        let tf = t as f64;
        for (node, chans) in profiles.iter().enumerate() {
            for (ch, p) in chans.iter().enumerate() {
                let daily = (TAU * tf / pd + p.daily_phase).sin();
                let weekly = 1.0 + p.depth * (TAU * tf / pw + p.weekly_phase).sin();
                flows[(t * n + node) * c + ch] = p.base + p.amplitude * daily * weekly;
            }
        }
    }

    let mut nbrs: Vec<Vec<usize>> = (0..n).map(|u| graph.out_neighbors(u).to_vec()).collect();
    if graph.is_directed() {
        // Smooth over both directions so correlation does not depend on edge orientation.
        for &(u, v) in graph.edges() {
            nbrs[v].push(u);
        }
    }
    for _ in 0..spec.diffusion_rounds {
        let prev = flows.clone();
        for t in 0..steps {
            for node in 0..n {
                for ch in 0..c {
                    let at = |m: usize| prev[(t * n + m) * c + ch];
                    let sum: f64 = at(node) + nbrs[node].iter().map(|&m| at(m)).sum::<f64>();
                    flows[(t * n + node) * c + ch] = sum / (1 + nbrs[node].len()) as f64;
                }
            }
        }
    }

    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise level");
        for v in flows.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let days_per_week = (spec.weekly_period / spec.daily_period) as f64;
    let timestamps: Vec<f64> = (0..steps)
        .flat_map(|t| {
            let tod = (t % spec.daily_period) as f64 / pd;
            let day = ((t / spec.daily_period) as f64) % days_per_week;
            [tod, day / days_per_week]
        })
        .collect();

    let ds = FlowDataset::new(
        NdArray::new(&[steps, n, c], flows)?,
        NdArray::new(&[steps, 2], timestamps)?,
        Arc::new(graph),
    )?;
    Ok((ds, profiles))
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<FlowDataset> {
    Ok(synthesize_with_profiles(spec)?.0)
}

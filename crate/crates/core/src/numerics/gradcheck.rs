//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Every coordinate is checked when the store holds at most this many
    /// scalars; otherwise a random subsample of this size.
    pub max_coords: usize,
    pub seed: u64,
    /// Smallest relative-error denominator. Gradients below this magnitude
    /// are compared on an absolute scale, since finite differences cannot
    /// resolve them relative to rounding noise of order `ε·|f|/h`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 200,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordError {
    pub param: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<CoordError>,
}

/// Compares the gradients already stored in `store` against
/// `(f(θ+h) − f(θ−h)) / 2h`, with relative error denominator
/// `max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check(
    mut forward: impl FnMut(&ParameterStore) -> Result<f64>,
    store: &mut ParameterStore,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(Error::Gradient(format!("step must be positive, got {}", options.step)));
    }
    let f0 = forward(store)?;
    let f1 = forward(store)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Gradient(format!(
            "non-deterministic forward: {f0} then {f1}"
        )));
    }

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for off in 0..store.value(id).len() {
            coords.push((id, off));
        }
    }
    if coords.len() > options.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut picked = sample(&mut rng, coords.len(), options.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let h = options.step;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, off) in coords {
        let orig = store.value(id).data()[off];
        store.value_mut(id).data_mut()[off] = orig + h;
        let plus = forward(store);
        store.value_mut(id).data_mut()[off] = orig - h;
        let minus = forward(store);
        store.value_mut(id).data_mut()[off] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let analytic = store.grad(id).data()[off];
        let denom = analytic.abs().max(numeric.abs()).max(options.floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(CoordError {
                param: store.name(id).to_string(),
                offset: off,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

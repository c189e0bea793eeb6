//! Dense arrays, differentiable primitives, the Adam optimizer and the
//! finite-difference gradient oracle.

mod adam;
mod array;
mod gemm;
mod gradcheck;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::NdArray;
pub use gradcheck::{finite_difference_check, CoordError, GradCheckOptions, GradCheckReport};
pub use params::{Init, ParamId, ParameterStore};
pub use tape::{softmax_last, Gradients, Tape, Var};


use crate::error::{Error, Result};

/// `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
pub fn linear(x: &NdArray, w: &NdArray, b: &NdArray) -> Result<NdArray> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.linear(xv, wv, Some(bv))?;
    Ok(tape.value(y).clone())
}

/// Softmax along `axis`.
pub fn softmax(x: &NdArray, axis: usize) -> Result<NdArray> {
    let nd = x.ndim();
    if axis >= nd {
        return Err(Error::shape(format!("softmax axis {axis} for rank {nd}")));
    }
    if axis == nd - 1 {
        return Ok(softmax_last(x));
    }
    let mut axes: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
    axes.push(axis);
    let mut inv = vec![0; nd];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    softmax_last(&x.permute(&axes)?).permute(&inv)
}

/// Normalizes the last axis to zero mean and unit variance, then applies the
/// affine `gamma`, `beta`.
pub fn layer_norm(x: &NdArray, gamma: &NdArray, beta: &NdArray, eps: f64) -> Result<NdArray> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`] and are referred to by [`Var`] handles. Parameters
//! are kept outside the tape in [`Parameters`] and bound as leaves for each
//! forward pass, so a tape is cheap to throw away after every update. Input
//! tensors can be bound as differentiable leaves too, which is what the
//! saliency computations rely on.

mod optim;
mod tape;
mod tensor;

pub mod finite_diff;

use thiserror::Error;

pub use optim::{xavier_uniform, Adam, AdamConfig, Optimizer, Parameters, Sgd};
pub use tape::{Tape, Var, KL_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter `{name}` (#{index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Softmax of a plain slice, outside any tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `linear(x) = x W + b` for `x: [r, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

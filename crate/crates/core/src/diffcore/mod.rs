//! Minimal reverse-mode automatic differentiation.
//!
//! Values are batched tensors; every primitive records a node on a [`Tape`]
//! and backward replays the nodes in reverse recording order. Fused
//! primitives (hash encoding, spline evaluation) plug in through
//! [`CustomOp`].

mod tape;
mod tensor;

pub use tape::{CustomOp, Grad, Gradients, InputGrads, Tape, Var};
pub use tensor::{pairwise_sum, Tensor};


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("index {index} out of range {len} in {op}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("gradient of a non-scalar output {0:?} requires an explicit seed")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite value while probing coordinate {0}")]
    NonFinite(usize),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("{0}")]
    Other(String),
}

/// Run `f` on fresh leaves built from `inputs` and differentiate its scalar
/// output. Returns the output value and, per input, its gradient when that
/// input has `requires_grad` set.
pub fn evaluate_with_gradients<T, F>(
    f: F,
    inputs: &[Tensor<T>],
) -> Result<(Tensor<T>, Vec<Option<Tensor<T>>>), DiffError>
where
    T: crate::Real,
    F: for<'t> Fn(&mut Tape<'t, T>, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).clone();
    let grads = tape.backward(out)?;
    let per_input = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            t.requires_grad.then(|| {
                Tensor::new(t.shape().to_vec(), grads.dense(v, t.len())).expect("same shape as input")
            })
        })
        .collect();
    Ok((value, per_input))
}

/// Maximum relative error between the reverse-mode gradient of `f` at
/// `point` and central finite differences with the given step.
pub fn check_gradients<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::BadStep(step));
    }
    let eval = |x: &Tensor<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            return Err(DiffError::NonScalarOutput(val.shape().to_vec()));
        }
        Ok(val.item())
    };
    let x = point.clone().with_grad();
    let (value, grads) = evaluate_with_gradients(|t, v| f(t, v[0]), std::slice::from_ref(&x))?;
    if !value.item().is_finite() {
        return Err(DiffError::NonFinite(0));
    }
    let analytic = grads.into_iter().next().flatten().expect("input requires grad");
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(&plus)?, eval(&minus)?);
        let a = analytic.data()[i];
        if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
            return Err(DiffError::NonFinite(i));
        }
        let fd = (fp - fm) / (2.0 * step);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

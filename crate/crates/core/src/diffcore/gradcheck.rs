//! Central finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric gradient of one input.
///
/// Coordinates are compared against the largest gradient magnitude of that
/// input, so vanishing coordinates do not divide by round-off.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale.max(1e-12)
}

/// Compares the tape gradient of the scalar function `f` with central
/// differences `(f(x+h) - f(x-h)) / 2h` for every coordinate of every input.
pub fn grad_check<S, F>(f: F, inputs: &[Tensor<S>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v).to_f64_vec()).collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = input.data()[j];
            work[idx].data_mut()[j] = base + S::of(h);
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = base - S::of(h);
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = base;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic[idx], &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}

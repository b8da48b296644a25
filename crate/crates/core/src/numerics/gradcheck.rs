//! Central finite-difference checks for tape-built scalar functions.

use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::Result;

/// Worst discrepancy between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |a - n| / max(|a|, |n|, floor)` over all checked components.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub components: usize,
}

/// Compares `backward` against central differences with step `eps`.
///
/// `build` receives a fresh tape with `inputs` registered as parameters (in
/// order) and must return a scalar node. `floor` keeps the relative error
/// meaningful for near-zero gradient components.
pub fn check<F>(inputs: &[Tensor], eps: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        components: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let x0 = input.data()[k];
            work[ti].data_mut()[k] = x0 + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[k] = x0 - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            out.max_abs_error = out.max_abs_error.max(abs);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.components += 1;
        }
    }
    Ok(out)
}

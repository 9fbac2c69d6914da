//! Central finite-difference gradient checking.
//!
//! The numerical side re-evaluates the scalar loss with each input element
//! nudged by ±eps, entirely independent of the backward pass it verifies.
//! Checks run in f64 so that truncation error stays far below the pass
//! threshold.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Builds the scalar loss from leaves registered on the given tape, in the
/// same input order as the tensors handed to [`check_gradients`].
pub type LossBuilder<F> = dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>;

/// Compare analytical gradients of `build` against central finite
/// differences for every element of every input, with relative tolerance
/// `tol` (absolute floor 1e-7 for near-zero gradients). Returns a
/// description of the first mismatch.
pub fn check_gradients(
    build: &LossBuilder<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> std::result::Result<(), String> {
    let eval = |tensors: &[Tensor<f64>]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = build(&mut tape, &vars).map_err(|e| e.to_string())?;
        Ok(tape.value(loss).data[0])
    };

    // Analytical pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let loss = build(&mut tape, &vars).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    for (pi, input) in inputs.iter().enumerate() {
        let analytical = grads
            .of(vars[pi])
            .ok_or_else(|| format!("input {pi}: no gradient recorded"))?;
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[pi].data[ei] -= eps;
            let numerical = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytical[ei];
            let denom = a.abs().max(numerical.abs());
            let diff = (a - numerical).abs();
            if diff > tol * denom && diff > 1e-7 {
                return Err(format!(
                    "input {pi} element {ei}: analytical {a:.8e} vs numerical {numerical:.8e} \
                     (rel err {:.3e})",
                    diff / denom.max(1e-12)
                ));
            }
        }
    }
    Ok(())
}

/// Convenience wrapper asserting at the default eps/tolerance.
pub fn assert_gradients(build: &LossBuilder<f64>, inputs: &[Tensor<f64>]) {
    if let Err(msg) = check_gradients(build, inputs, DEFAULT_EPS, DEFAULT_TOL) {
        panic!("gradient check failed: {msg}");
    }
}

//! Finite-difference gradient verification.
//!
//! `grad_check` compares reverse-mode gradients against central finite
//! differences entry by entry. `grad_check_sampled` checks a deterministic
//! evenly-strided subset of each parameter tensor, which keeps whole-model
//! checks (hundreds of thousands of parameters) inside a seconds budget.

use super::tape::{NodeId, Tape};
use super::tensor::{NumericsError, Tensor};

/// Relative error between an analytic and a numeric derivative, floored so
/// that near-zero gradients are compared absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn check_impl<F>(
    mut build: F,
    params: &[Tensor],
    step: f64,
    per_param_limit: Option<usize>,
) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    // Analytic gradients from one reverse sweep.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id).clone()).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let indices: Vec<usize> = match per_param_limit {
            Some(limit) if n > limit => {
                // Evenly strided deterministic subset.
                (0..limit).map(|j| j * n / limit).collect()
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = work.iter().map(|p| tape.leaf(p.clone())).collect();
            let lp = build(&mut tape, &ids)?;
            let plus = tape.value(lp).item();
            work[pi].data_mut()[i] = orig - step;
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = work.iter().map(|p| tape.leaf(p.clone())).collect();
            let lm = build(&mut tape, &ids)?;
            let minus = tape.value(lm).item();
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_err(analytic[pi].data()[i], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Exhaustive check of every parameter entry. Returns the maximum relative
/// error over all entries.
pub fn grad_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    check_impl(build, params, step, None)
}

/// Checks an evenly-strided deterministic subset of at most
/// `per_param_limit` entries per parameter tensor.
pub fn grad_check_sampled<F>(
    build: F,
    params: &[Tensor],
    step: f64,
    per_param_limit: usize,
) -> Result<f64, NumericsError>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    check_impl(build, params, step, Some(per_param_limit))
}

//! Finite-difference verification of tape gradients.
//!
//! The harness takes a closure that rebuilds the computation from scratch on
//! a fresh tape, so the numeric side never touches the analytic machinery:
//! central differences on the loss value are the only authority.

use crate::error::{Error, Result};

use super::{Precision, Tape, Tensor};
use super::tape::NodeId;

/// Default perturbation for central differences.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

/// Worst coordinate found by a multi-input check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
}

/// Check the tape gradient of `f` (a scalar function of one tensor) against
/// central differences. Returns the maximum relative error over coordinates,
/// where each coordinate is scored as
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Runs in double precision regardless of the engine flag.
pub fn finite_difference_check(
    f: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let report = finite_difference_check_multi(|tape, ids| f(tape, ids[0]), &[x.clone()], eps)?;
    Ok(report.max_rel_err)
}

/// Multi-input variant: checks the gradient with respect to every input.
pub fn finite_difference_check_multi(
    f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    xs: &[Tensor],
    eps: f64,
) -> Result<FdReport> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite difference eps must be positive, got {eps}")));
    }

    // analytic gradients from one taped run
    let mut tape = Tape::with_precision(Precision::Double);
    let ids: Vec<NodeId> = xs.iter().map(|x| tape.var(x.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Dim(format!(
            "finite_difference_check needs a scalar function, got output shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(xs)
        .map(|(&id, x)| grads.take(id).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    // value-only probe used for the numeric side
    let eval = |xs_pert: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_precision(Precision::Double);
        let ids: Vec<NodeId> = xs_pert.iter().map(|x| tape.var(x.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = FdReport { max_rel_err: 0.0, worst_input: 0, worst_coord: 0 };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for c in 0..x.numel() {
            let orig = x.data()[c];
            work[i].data_mut()[c] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][c];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_err {
                report = FdReport { max_rel_err: rel, worst_input: i, worst_coord: c };
            }
        }
    }
    Ok(report)
}

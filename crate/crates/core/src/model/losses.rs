//! Multi-task training objective.
//!
//! Count-style heads train on a Poisson likelihood over log rates, mortality
//! on a numerically safe logistic loss, stay lengths on a Huber distance
//! masked to steps that actually have a next visit. The total is a weighted
//! sum over whichever (head, target) pairs the batch provides.

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

use super::blocks::ModelOutput;

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub count: f64,
    pub diag: f64,
    pub mortality: f64,
    pub los: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { count: 1.0, diag: 1.0, mortality: 1.0, los: 1.0, huber_delta: 1.0 }
    }
}

pub fn multitask_loss(
    tape: &mut Tape,
    out: &ModelOutput,
    batch: &SequenceBatch,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut terms: Vec<NodeId> = Vec::new();
    if w.count != 0.0 {
        if let (Some(pred), Some(y)) = (out.count, &batch.targets.y_count) {
            let l = tape.poisson_nll(pred, y, None)?;
            terms.push(tape.scale(l, w.count)?);
        }
    }
    if w.diag != 0.0 {
        if let (Some(pred), Some(y)) = (out.diag, &batch.targets.y_diag) {
            let l = tape.poisson_nll(pred, y, None)?;
            terms.push(tape.scale(l, w.diag)?);
        }
    }
    if w.mortality != 0.0 {
        if let (Some(pred), Some(y)) = (out.mortality, &batch.targets.y_death) {
            let l = tape.bce_with_logits(pred, y, None)?;
            terms.push(tape.scale(l, w.mortality)?);
        }
    }
    if w.los != 0.0 {
        if let (Some(pred), Some(y), Some(mask)) =
            (out.los, &batch.targets.y_los, &batch.targets.los_mask)
        {
            // a minibatch can legitimately hold zero scorable steps; that is
            // absence of supervision, not an error
            if mask.iter().any(|&m| m != 0) {
                let weights: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
                let l = tape.huber(pred, y, w.huber_delta, Some(&weights))?;
                terms.push(tape.scale(l, w.los)?);
            }
        }
    }
    let mut iter = terms.into_iter();
    let Some(first) = iter.next() else {
        return Err(Error::Data("batch provides no targets for the configured heads".into()));
    };
    iter.try_fold(first, |acc, t| tape.add(acc, t))
}

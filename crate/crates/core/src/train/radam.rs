//! Rectified Adam with decoupled weight decay.
//!
//! Early steps have too few second-moment samples for the adaptive
//! denominator to mean anything, so the variance rectifier falls back to
//! plain momentum until the estimate stabilises. No warmup hacks needed on
//! top, which is why it pairs well with an aggressive triangle schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled multiplicative decay: theta *= 1 - lr * weight_decay.
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment buffers, keyed by parameter name. Kept in f64
/// regardless of the store precision so quantisation noise does not
/// accumulate across steps.
#[derive(Debug, Default)]
pub struct OptimizerState {
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Length of the SMA that the rectifier converges to: 2 / (1 - beta2) - 1.
fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// One update over every parameter that received a gradient. Parameters
/// absent from `grads` (heads of untrained tasks) are left untouched,
/// including their decay. Re-pins structural zeros afterwards so pinned
/// entries can never drift, whatever the gradients said.
pub fn radam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    cfg: &RAdamConfig,
    lr: f64,
    quantize: bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let r_inf = rho_inf(b2);
    let rho_t = r_inf - 2.0 * t * b2.powf(t) / bias2;
    let rectified = rho_t > 4.0;
    let rect = if rectified {
        (((rho_t - 4.0) * (rho_t - 2.0) * r_inf) / ((r_inf - 4.0) * (r_inf - 2.0) * rho_t)).sqrt()
    } else {
        0.0
    };

    for (name, g) in grads {
        let theta = params.get_mut(name)?;
        if g.len() != theta.numel() {
            return Err(Error::Dim(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                theta.numel()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let data = theta.data_mut();
        for i in 0..g.len() {
            let gi = g[i];
            if !gi.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in {name}")));
            }
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let update = if rectified {
                let v_hat = (v[i] / bias2).sqrt();
                lr * rect * m_hat / (v_hat + cfg.eps)
            } else {
                lr * m_hat
            };
            let next = data[i] * (1.0 - lr * cfg.weight_decay) - update;
            if !next.is_finite() {
                return Err(Error::Numerical(format!("parameter {name} diverged")));
            }
            data[i] = next;
        }
        if quantize {
            theta.quantize_single();
        }
    }
    params.pin_structural();
    Ok(())
}

//! Evaluation metrics, each O(n log n), checked in tests against quadratic
//! reference implementations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_paired(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Data(format!("{what}: empty input")));
    }
    if a.len() != b.len() {
        return Err(Error::Data(format!("{what}: length mismatch {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite value")));
    }
    Ok(())
}

/// Coefficient of determination. Negative when the predictor is worse than
/// the target mean; a constant target has no variance to explain and is a
/// data error.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_paired(pred, target, "r2")?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("r2: constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_paired(pred, target, "mae")?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

/// Fractional average ranks: ties share the mean of the positions they span.
fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j + 1 < xs.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) hold the tie group; mean 1-based rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Data("correlation undefined for a constant sequence".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Spearman rank correlation with fractional tie handling.
pub fn spearman(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_paired(pred, target, "spearman")?;
    pearson(&fractional_ranks(pred), &fractional_ranks(target))
}

/// Area under the ROC curve via the rank-sum identity. Labels must be 0/1
/// with both classes present.
pub fn auc(score: &[f64], label: &[f64]) -> Result<f64> {
    check_paired(score, label, "auc")?;
    let n_pos = label.iter().filter(|&&y| y == 1.0).count();
    let n_neg = label.iter().filter(|&&y| y == 0.0).count();
    if n_pos + n_neg != label.len() {
        return Err(Error::Data("auc: labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("auc: needs both classes".into()));
    }
    let ranks = fractional_ranks(score);
    let pos_rank_sum: f64 =
        ranks.iter().zip(label).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Full Poisson negative log likelihood, including the ln(y!) term the
/// training loss drops, so values are comparable across models with
/// different targets. `log_rate` is the model output before exp.
pub fn poisson_nll(log_rate: &[f64], target: &[f64]) -> Result<f64> {
    check_paired(log_rate, target, "poisson_nll")?;
    let mut total = 0.0;
    for (&x, &y) in log_rate.iter().zip(target) {
        if y < 0.0 || y.fract() != 0.0 {
            return Err(Error::Data(format!("poisson_nll: target {y} is not a count")));
        }
        let ln_fact: f64 = (1..=y as u64).map(|k| (k as f64).ln()).sum();
        total += x.exp() - y * x + ln_fact;
    }
    Ok(total / log_rate.len() as f64)
}

/// What `evaluate` hands back for one task on one split. Fields that do not
/// apply to the task stay `None`. `runtime_seconds` is wall time and is
/// excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poisson_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub runtime_seconds: f64,
}

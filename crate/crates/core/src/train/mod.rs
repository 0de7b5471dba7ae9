//! Training loop, transfer, and evaluation drivers.

pub mod metrics;
pub mod radam;
pub mod schedule;

pub use metrics::{auc, mae, poisson_nll, r2, spearman, MetricsReport};
pub use radam::{radam_step, OptimizerState, RAdamConfig};
pub use schedule::{cyclical_lr, ScheduleConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_pretrain_windows, PatientRecord, PretrainWindow, SequenceBatch, NUM_DIAG_CATEGORIES,
};
use crate::error::{Error, Result};
use crate::model::{bind_params, forward, multitask_loss, LossWeights, ModelConfig, ModelParams, Task};
use crate::tensor::{Precision, Tape};

#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub precision: Precision,
    pub loss_weights: LossWeights,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 20,
            batch_size: 64,
            peak_lr: 3e-3,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            seed: 0,
            patience: 0,
            precision: Precision::Single,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Rate used on the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochStats>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_train_loss: f64,
    pub stopped_early: bool,
}

/// Minibatch SGD with the rectified optimizer and triangle schedule. With a
/// validation batch the best-scoring parameters are restored at the end;
/// without one the final parameters stand. A non-finite loss or update aborts
/// the run, puts the parameters back to the end of the last completed epoch,
/// and surfaces the numerical error.
pub fn fit(
    cfg: &ModelConfig,
    params: &mut ModelParams,
    run: &TrainRunConfig,
    train: &SequenceBatch,
    val: Option<&SequenceBatch>,
) -> Result<FitReport> {
    if run.epochs == 0 || run.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let steps_per_epoch = train.b.div_ceil(run.batch_size);
    let schedule = ScheduleConfig::with_warmup_fraction(
        run.peak_lr,
        run.epochs * steps_per_epoch,
        run.warmup_fraction,
    )?;
    let opt_cfg = RAdamConfig { weight_decay: run.weight_decay, ..RAdamConfig::default() };
    let quantize = run.precision == Precision::Single;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut opt = OptimizerState::new();
    let mut last_good = params.clone();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;
    let mut history = Vec::with_capacity(run.epochs);
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..train.b).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut rows = 0usize;
        let mut epoch_lr = 0.0;

        for chunk in order.chunks(run.batch_size) {
            let mb = train.select(chunk)?;
            epoch_lr = cyclical_lr(&schedule, step);
            step += 1;
            let outcome = (|| -> Result<f64> {
                let mut tape = Tape::with_precision(run.precision);
                let bound = bind_params(&mut tape, params, true);
                let out = forward(&mut tape, &bound, cfg, &mb, Some(&mut dropout_rng))?;
                let loss = multitask_loss(&mut tape, &out, &mb, &run.loss_weights)?;
                let loss_value = tape.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "training loss diverged at epoch {epoch}"
                    )));
                }
                let mut grads = tape.backward(loss)?;
                let mut by_name: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                for (name, id) in bound.iter() {
                    if let Some(g) = grads.take(id) {
                        by_name.insert(name.to_string(), g.data().to_vec());
                    }
                }
                radam_step(params, &by_name, &mut opt, &opt_cfg, epoch_lr, quantize)?;
                Ok(loss_value)
            })();
            match outcome {
                Ok(loss_value) => {
                    loss_sum += loss_value * chunk.len() as f64;
                    rows += chunk.len();
                }
                Err(err @ Error::Numerical(_)) => {
                    *params = last_good;
                    return Err(err);
                }
                Err(err) => return Err(err),
            }
        }

        let train_loss = loss_sum / rows as f64;
        let val_loss = match val {
            Some(vb) => Some(eval_loss(
                cfg,
                params,
                vb,
                &run.loss_weights,
                run.batch_size,
                run.precision,
            )?),
            None => None,
        };
        history.push(EpochStats { epoch, train_loss, val_loss, lr: epoch_lr });
        last_good = params.clone();

        if let Some(v) = val_loss {
            let improved = best.as_ref().map_or(true, |(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if run.patience > 0 && since_best >= run.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (best_val_loss, best_epoch) = match best {
        Some((v, e, p)) => {
            *params = p;
            (Some(v), Some(e))
        }
        None => (None, None),
    };
    let final_train_loss = history.last().map(|h| h.train_loss).unwrap_or(f64::NAN);
    Ok(FitReport { history, best_val_loss, best_epoch, final_train_loss, stopped_early })
}

/// Loss on a batch with constant parameters and no dropout, averaged over
/// row chunks of `chunk_rows` to bound tape memory. This is a tracking
/// number: a chunk whose stay targets are fully masked contributes its other
/// terms only.
pub fn eval_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &SequenceBatch,
    weights: &LossWeights,
    chunk_rows: usize,
    precision: Precision,
) -> Result<f64> {
    if chunk_rows == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut loss_sum = 0.0;
    for start in (0..batch.b).step_by(chunk_rows) {
        let rows: Vec<usize> = (start..(start + chunk_rows).min(batch.b)).collect();
        let mb = batch.select(&rows)?;
        let mut tape = Tape::with_precision(precision);
        let bound = bind_params(&mut tape, params, false);
        let out = forward(&mut tape, &bound, cfg, &mb, None)?;
        let loss = multitask_loss(&mut tape, &out, &mb, weights)?;
        loss_sum += tape.value(loss).data()[0] * rows.len() as f64;
    }
    Ok(loss_sum / batch.b as f64)
}

/// History rows as `epoch,train_loss,val_loss,lr`, written atomically.
pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,lr\n");
    for row in history {
        let val = row.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(text, "{},{},{},{}", row.epoch, row.train_loss, val, row.lr)
            .expect("string write");
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ── prediction and metrics ───────────────────────────────────────────────────

fn gather_head(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &SequenceBatch,
    task: Task,
    chunk_rows: usize,
) -> Result<Vec<f64>> {
    let mut out_data = Vec::new();
    for start in (0..batch.b).step_by(chunk_rows) {
        let rows: Vec<usize> = (start..(start + chunk_rows).min(batch.b)).collect();
        let mb = batch.select(&rows)?;
        let mut tape = Tape::with_precision(Precision::Double);
        let bound = bind_params(&mut tape, params, false);
        let out = forward(&mut tape, &bound, cfg, &mb, None)?;
        let id = match task {
            Task::Count => out.count,
            Task::Diag => out.diag,
            Task::Mortality => out.mortality,
            Task::Los => out.los,
        }
        .ok_or_else(|| Error::Config(format!("model produced no {task} output")))?;
        out_data.extend_from_slice(tape.value(id).data());
    }
    Ok(out_data)
}

/// Task metrics on one batch. Predictions run in double precision over row
/// chunks; the report's `runtime_seconds` is the only non-deterministic
/// field.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &SequenceBatch,
    task: Task,
    chunk_rows: usize,
) -> Result<MetricsReport> {
    if !cfg.tasks.contains(&task) {
        return Err(Error::Config(format!("model has no {task} head")));
    }
    if chunk_rows == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let started = Instant::now();
    let pred = gather_head(cfg, params, batch, task, chunk_rows)?;
    let mut report = MetricsReport {
        task: task.to_string(),
        n: batch.b,
        r2: None,
        spearman: None,
        mae: None,
        poisson_nll: None,
        auc: None,
        runtime_seconds: 0.0,
    };
    match task {
        Task::Count => {
            let y = batch
                .targets
                .y_count
                .as_ref()
                .ok_or_else(|| Error::Data("batch carries no count targets".into()))?;
            let rate: Vec<f64> = pred.iter().map(|x| x.exp()).collect();
            report.r2 = Some(r2(&rate, y)?);
            report.spearman = Some(spearman(&rate, y)?);
            report.mae = Some(mae(&rate, y)?);
            report.poisson_nll = Some(poisson_nll(&pred, y)?);
        }
        Task::Diag => {
            let y = batch
                .targets
                .y_diag
                .as_ref()
                .ok_or_else(|| Error::Data("batch carries no per-category targets".into()))?;
            // column views per category; categories whose targets have no
            // variance in this batch are skipped in the rank metrics
            let k = NUM_DIAG_CATEGORIES;
            let mut r2s = Vec::new();
            let mut rhos = Vec::new();
            for c in 0..k {
                let yc: Vec<f64> = (0..batch.b).map(|b| y[b * k + c]).collect();
                let pc: Vec<f64> = (0..batch.b).map(|b| pred[b * k + c].exp()).collect();
                if let Ok(v) = r2(&pc, &yc) {
                    r2s.push(v);
                }
                if let Ok(v) = spearman(&pc, &yc) {
                    rhos.push(v);
                }
            }
            if !r2s.is_empty() {
                report.r2 = Some(r2s.iter().sum::<f64>() / r2s.len() as f64);
            }
            if !rhos.is_empty() {
                report.spearman = Some(rhos.iter().sum::<f64>() / rhos.len() as f64);
            }
            let rate: Vec<f64> = pred.iter().map(|x| x.exp()).collect();
            report.mae = Some(mae(&rate, y)?);
            report.poisson_nll = Some(poisson_nll(&pred, y)?);
        }
        Task::Mortality => {
            let y = batch
                .targets
                .y_death
                .as_ref()
                .ok_or_else(|| Error::Data("batch carries no death labels".into()))?;
            report.auc = Some(auc(&pred, y)?);
        }
        Task::Los => {
            let y = batch
                .targets
                .y_los
                .as_ref()
                .ok_or_else(|| Error::Data("batch carries no stay targets".into()))?;
            let mask = batch.targets.los_mask.as_ref().expect("stay targets carry a mask");
            let mut p = Vec::new();
            let mut t = Vec::new();
            for i in 0..y.len() {
                if mask[i] == 1 {
                    p.push(pred[i]);
                    t.push(y[i]);
                }
            }
            report.n = p.len();
            report.mae = Some(mae(&p, &t)?);
            report.r2 = Some(r2(&p, &t)?);
            report.spearman = Some(spearman(&p, &t)?);
        }
    }
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

// ── transfer ─────────────────────────────────────────────────────────────────

/// Sliding pretraining windows from every patient outside the excluded
/// subgroup, split into train and validation at the patient level so no
/// patient straddles the two sides.
pub fn pretrain_split(
    records: &[PatientRecord],
    exclude_subgroup: Option<&str>,
    window_days: i64,
    stride_days: i64,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PretrainWindow>, Vec<PretrainWindow>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let eligible: Vec<&PatientRecord> = records
        .iter()
        .filter(|r| exclude_subgroup.map_or(true, |label| !r.subgroup_labels.contains(label)))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Data("no patients left after the subgroup exclusion".into()));
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val_fraction * eligible.len() as f64).floor() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let windows = extract_pretrain_windows(eligible[i], window_days, stride_days)?;
        if pos < n_val {
            val.extend(windows);
        } else {
            train.extend(windows);
        }
    }
    if train.is_empty() {
        return Err(Error::Data("no training windows; records may be too short".into()));
    }
    Ok((train, val))
}

/// Fresh parameters for `cfg` with the trunk copied from a pretrained set.
/// Heads always start over. Any trunk parameter that is missing or
/// mis-shaped in the source fails the whole transfer, listing the offenders.
pub fn transfer_from_pretrained(
    pretrained: &ModelParams,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ModelParams> {
    let mut fresh = ModelParams::init(cfg, seed)?;
    let mut problems = Vec::new();
    for name in fresh.names() {
        if name.starts_with("head.") {
            continue;
        }
        match pretrained.get(&name) {
            Ok(src) => {
                let dst = fresh.get_mut(&name)?;
                if src.shape() == dst.shape() {
                    *dst = src.clone();
                } else {
                    problems.push(format!(
                        "{name}: pretrained {:?} vs target {:?}",
                        src.shape(),
                        dst.shape()
                    ));
                }
            }
            Err(_) => problems.push(format!("{name}: missing from the pretrained set")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Transfer(problems));
    }
    fresh.pin_structural();
    Ok(fresh)
}

// ── hyperparameter sweep ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
}

/// Random search draws: rate and decay log-uniform, dropout from a small
/// grid.
pub fn sample_sweep(n: usize, seed: u64) -> Vec<SweepPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    };
    (0..n)
        .map(|_| SweepPoint {
            lr: log_uniform(&mut rng, 1e-5, 1e-3),
            weight_decay: log_uniform(&mut rng, 1e-5, 1e-1),
            dropout: *[0.1, 0.2, 0.3].choose(&mut rng).expect("non-empty grid"),
        })
        .collect()
}

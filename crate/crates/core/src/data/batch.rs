//! Fixed-shape batches: records in, padded id/mask arrays out.
//!
//! Shapes are `[b, t, v]` for code ids and `[b, t]` for per-visit fields, with
//! `t` and `v` fixed by the caller so every batch in a run matches the model's
//! sequence-mixing weights. Visits beyond `t` are dropped from the old end,
//! codes beyond `v` from the low-priority end.

use chrono::{Days, NaiveDate};

use super::delta::{bucketize_delta_tau, compute_delta_tau};
use super::vocab::Vocabulary;
use super::{PatientRecord, Visit};
use crate::error::{Error, Result};

/// Count targets are clipped here; the tail above this is one shared bucket.
pub const TOPCAP: u32 = 36;

/// Diagnosis chapters tracked by the per-category count head, keyed by the
/// first character of a code.
pub const CATEGORY_PREFIXES: [char; 6] = ['C', 'E', 'G', 'I', 'J', 'K'];
pub const NUM_DIAG_CATEGORIES: usize = CATEGORY_PREFIXES.len();

pub fn diag_category(code: &str) -> Option<usize> {
    let first = code.chars().next()?;
    CATEGORY_PREFIXES.iter().position(|&p| p == first)
}

/// What to predict, and therefore how each record is windowed.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchTask {
    /// History is the `history_days` before an anchor date, targets are visit
    /// counts (total and per category) in the `history_days` after it. With a
    /// subgroup the anchor is that subgroup's first diagnosis date; without
    /// one it is `history_days` after the first visit.
    NextPeriodCounts { subgroup: Option<String>, history_days: i64 },
    /// Inputs drop the last `offset` visits; target is whether the record ends
    /// in an admission marked as died.
    Mortality { offset: usize },
    /// Inputs are the full history; target at step `t` is the length of stay
    /// of visit `t + 1`.
    NextVisitLos,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchTargets {
    pub y_count: Option<Vec<f64>>,  // [b]
    pub y_diag: Option<Vec<f64>>,   // [b * NUM_DIAG_CATEGORIES]
    pub y_death: Option<Vec<f64>>,  // [b]
    pub y_los: Option<Vec<f64>>,    // [b * t]
    pub los_mask: Option<Vec<u8>>,  // [b * t]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub b: usize,
    pub t: usize,
    pub v: usize,
    pub code_ids: Vec<u32>,     // [b * t * v], pad id 0 on unused slots
    pub delta_bucket: Vec<u32>, // [b * t], 0 at step 0 and on padding
    pub visit_mask: Vec<u8>,    // [b * t]
    pub code_mask: Vec<u8>,     // [b * t * v]
    pub targets: BatchTargets,
    /// Records dropped for having no usable window under the task.
    pub skipped: usize,
}

impl SequenceBatch {
    /// Row-gather for minibatching; indices may repeat.
    pub fn select(&self, rows: &[usize]) -> Result<SequenceBatch> {
        for &r in rows {
            if r >= self.b {
                return Err(Error::Index(format!("batch row {r} out of {}", self.b)));
            }
        }
        let gather_f = |src: &Option<Vec<f64>>, width: usize| {
            src.as_ref().map(|d| {
                rows.iter().flat_map(|&r| d[r * width..(r + 1) * width].iter().copied()).collect()
            })
        };
        let gather_u8 = |src: &Option<Vec<u8>>, width: usize| {
            src.as_ref().map(|d| {
                rows.iter().flat_map(|&r| d[r * width..(r + 1) * width].iter().copied()).collect()
            })
        };
        let tv = self.t * self.v;
        Ok(SequenceBatch {
            b: rows.len(),
            t: self.t,
            v: self.v,
            code_ids: rows.iter().flat_map(|&r| self.code_ids[r * tv..(r + 1) * tv].iter().copied()).collect(),
            delta_bucket: rows.iter().flat_map(|&r| self.delta_bucket[r * self.t..(r + 1) * self.t].iter().copied()).collect(),
            visit_mask: rows.iter().flat_map(|&r| self.visit_mask[r * self.t..(r + 1) * self.t].iter().copied()).collect(),
            code_mask: rows.iter().flat_map(|&r| self.code_mask[r * tv..(r + 1) * tv].iter().copied()).collect(),
            targets: BatchTargets {
                y_count: gather_f(&self.targets.y_count, 1),
                y_diag: gather_f(&self.targets.y_diag, NUM_DIAG_CATEGORIES),
                y_death: gather_f(&self.targets.y_death, 1),
                y_los: gather_f(&self.targets.y_los, self.t),
                los_mask: gather_u8(&self.targets.los_mask, self.t),
            },
            skipped: 0,
        })
    }
}

struct Row<'a> {
    window: &'a [Visit],
    y_count: Option<f64>,
    y_diag: Option<[f64; NUM_DIAG_CATEGORIES]>,
    y_death: Option<f64>,
    with_los: bool,
}

fn count_in_window(visits: &[Visit], from: NaiveDate, to: NaiveDate) -> u32 {
    visits.iter().filter(|v| v.date >= from && v.date < to).count().min(TOPCAP as usize) as u32
}

fn diag_counts_in_window(visits: &[Visit], from: NaiveDate, to: NaiveDate) -> [f64; NUM_DIAG_CATEGORIES] {
    let mut out = [0u32; NUM_DIAG_CATEGORIES];
    for v in visits.iter().filter(|v| v.date >= from && v.date < to) {
        let mut seen = [false; NUM_DIAG_CATEGORIES];
        for code in &v.codes {
            if let Some(c) = diag_category(code) {
                seen[c] = true;
            }
        }
        for (c, hit) in seen.iter().enumerate() {
            if *hit {
                out[c] = (out[c] + 1).min(TOPCAP);
            }
        }
    }
    out.map(|n| n as f64)
}

fn slice_by_dates(visits: &[Visit], from: NaiveDate, to: NaiveDate) -> &[Visit] {
    let start = visits.partition_point(|v| v.date < from);
    let end = visits.partition_point(|v| v.date < to);
    &visits[start..end]
}

/// Build one padded batch from records under a task. Records without a usable
/// window are counted in `skipped`, never silently encoded as empty rows.
pub fn make_batch(
    records: &[&PatientRecord],
    task: &BatchTask,
    vocab: &Vocabulary,
    t_max: usize,
    v_max: usize,
) -> Result<SequenceBatch> {
    if t_max == 0 || v_max == 0 {
        return Err(Error::Config("batch dimensions t_max and v_max must be positive".into()));
    }
    if let BatchTask::NextPeriodCounts { history_days, .. } = task {
        if *history_days <= 0 {
            return Err(Error::Config(format!("history window must be positive, got {history_days} days")));
        }
    }
    let mut rows: Vec<Row> = Vec::with_capacity(records.len());
    let mut skipped = 0usize;
    for rec in records {
        match task {
            BatchTask::NextPeriodCounts { subgroup, history_days } => {
                let anchor = match subgroup {
                    Some(label) => match rec.first_diagnosis_date.get(label) {
                        Some(d) => *d,
                        None => {
                            skipped += 1;
                            continue;
                        }
                    },
                    None => match rec.first_visit_date() {
                        Some(d) => d + Days::new(*history_days as u64),
                        None => {
                            skipped += 1;
                            continue;
                        }
                    },
                };
                let hist_from = anchor - Days::new(*history_days as u64);
                let target_to = anchor + Days::new(*history_days as u64);
                let window = slice_by_dates(&rec.visits, hist_from, anchor);
                if window.is_empty() {
                    skipped += 1;
                    continue;
                }
                rows.push(Row {
                    window,
                    y_count: Some(count_in_window(&rec.visits, anchor, target_to) as f64),
                    y_diag: Some(diag_counts_in_window(&rec.visits, anchor, target_to)),
                    y_death: None,
                    with_los: false,
                });
            }
            BatchTask::Mortality { offset } => {
                if rec.visits.len() <= *offset {
                    skipped += 1;
                    continue;
                }
                let died = rec.visits.iter().any(|v| v.died_this_admission == Some(true));
                rows.push(Row {
                    window: &rec.visits[..rec.visits.len() - offset],
                    y_count: None,
                    y_diag: None,
                    y_death: Some(if died { 1.0 } else { 0.0 }),
                    with_los: false,
                });
            }
            BatchTask::NextVisitLos => {
                if rec.visits.len() < 2 {
                    skipped += 1;
                    continue;
                }
                rows.push(Row {
                    window: &rec.visits,
                    y_count: None,
                    y_diag: None,
                    y_death: None,
                    with_los: true,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("no usable records for task {task:?} ({skipped} skipped)")));
    }

    let b = rows.len();
    let mut batch = SequenceBatch {
        b,
        t: t_max,
        v: v_max,
        code_ids: vec![0; b * t_max * v_max],
        delta_bucket: vec![0; b * t_max],
        visit_mask: vec![0; b * t_max],
        code_mask: vec![0; b * t_max * v_max],
        targets: BatchTargets::default(),
        skipped,
    };
    let any_count = rows.iter().any(|r| r.y_count.is_some());
    let any_death = rows.iter().any(|r| r.y_death.is_some());
    let any_los = rows.iter().any(|r| r.with_los);
    if any_count {
        batch.targets.y_count = Some(vec![0.0; b]);
        batch.targets.y_diag = Some(vec![0.0; b * NUM_DIAG_CATEGORIES]);
    }
    if any_death {
        batch.targets.y_death = Some(vec![0.0; b]);
    }
    if any_los {
        batch.targets.y_los = Some(vec![0.0; b * t_max]);
        batch.targets.los_mask = Some(vec![0; b * t_max]);
    }

    for (bi, row) in rows.iter().enumerate() {
        let kept = &row.window[row.window.len().saturating_sub(t_max)..];
        encode_window(&mut batch, bi, kept, vocab)?;
        if let Some(y) = row.y_count {
            batch.targets.y_count.as_mut().unwrap()[bi] = y;
        }
        if let Some(d) = row.y_diag {
            batch.targets.y_diag.as_mut().unwrap()[bi * NUM_DIAG_CATEGORIES..(bi + 1) * NUM_DIAG_CATEGORIES]
                .copy_from_slice(&d);
        }
        if let Some(y) = row.y_death {
            batch.targets.y_death.as_mut().unwrap()[bi] = y;
        }
        if row.with_los {
            let y_los = batch.targets.y_los.as_mut().unwrap();
            let mask = batch.targets.los_mask.as_mut().unwrap();
            for ti in 0..kept.len().saturating_sub(1) {
                if let Some(los) = kept[ti + 1].length_of_stay_days {
                    y_los[bi * t_max + ti] = los as f64;
                    mask[bi * t_max + ti] = 1;
                }
            }
        }
    }
    Ok(batch)
}

fn encode_window(batch: &mut SequenceBatch, bi: usize, kept: &[Visit], vocab: &Vocabulary) -> Result<()> {
    let (t_max, v_max) = (batch.t, batch.v);
    let dates: Vec<NaiveDate> = kept.iter().map(|v| v.date).collect();
    let gaps = compute_delta_tau(&dates);
    for (ti, visit) in kept.iter().enumerate() {
        batch.visit_mask[bi * t_max + ti] = 1;
        batch.delta_bucket[bi * t_max + ti] = bucketize_delta_tau(gaps[ti])? as u32;
        for (vi, code) in visit.codes.iter().take(v_max).enumerate() {
            batch.code_ids[(bi * t_max + ti) * v_max + vi] = vocab.id(code);
            batch.code_mask[(bi * t_max + ti) * v_max + vi] = 1;
        }
    }
    Ok(())
}

// ── Pretraining windows ─────────────────────────────────────────────────────

/// One sliding-window sample: a history window and the visit count in the
/// window that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainWindow {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub next_count: u32,
}

/// Slide a `window_days` history over a record, pairing each position with the
/// capped visit count of the next `window_days`. A record spanning fewer than
/// `window_days + 1` days yields nothing; history windows that happen to hold
/// no visits are still returned and dropped at batching.
pub fn extract_pretrain_windows(
    record: &PatientRecord,
    window_days: i64,
    stride_days: i64,
) -> Result<Vec<PretrainWindow>> {
    if window_days <= 0 || stride_days <= 0 {
        return Err(Error::Config("window and stride must be positive day counts".into()));
    }
    let (first, last) = match (record.visits.first(), record.visits.last()) {
        (Some(f), Some(l)) => (f.date, l.date),
        _ => return Ok(Vec::new()),
    };
    let span = (last - first).num_days();
    let mut out = Vec::new();
    let mut offset = 0i64;
    while offset + window_days <= span {
        let start = first + Days::new(offset as u64);
        let mid = start + Days::new(window_days as u64);
        let end = mid + Days::new(window_days as u64);
        out.push(PretrainWindow {
            patient_id: record.patient_id.clone(),
            visits: slice_by_dates(&record.visits, start, mid).to_vec(),
            next_count: count_in_window(&record.visits, mid, end),
        });
        offset += stride_days;
    }
    Ok(out)
}

/// Batch pretraining windows; the only target is the next-window count.
pub fn make_pretrain_batch(
    windows: &[PretrainWindow],
    vocab: &Vocabulary,
    t_max: usize,
    v_max: usize,
) -> Result<SequenceBatch> {
    if t_max == 0 || v_max == 0 {
        return Err(Error::Config("batch dimensions t_max and v_max must be positive".into()));
    }
    let usable: Vec<&PretrainWindow> = windows.iter().filter(|w| !w.visits.is_empty()).collect();
    let skipped = windows.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Data(format!("no usable pretraining windows ({skipped} skipped)")));
    }
    let b = usable.len();
    let mut batch = SequenceBatch {
        b,
        t: t_max,
        v: v_max,
        code_ids: vec![0; b * t_max * v_max],
        delta_bucket: vec![0; b * t_max],
        visit_mask: vec![0; b * t_max],
        code_mask: vec![0; b * t_max * v_max],
        targets: BatchTargets {
            y_count: Some(usable.iter().map(|w| w.next_count.min(TOPCAP) as f64).collect()),
            ..Default::default()
        },
        skipped,
    };
    for (bi, w) in usable.iter().enumerate() {
        let kept = &w.visits[w.visits.len().saturating_sub(t_max)..];
        encode_window(&mut batch, bi, kept, vocab)?;
    }
    Ok(batch)
}

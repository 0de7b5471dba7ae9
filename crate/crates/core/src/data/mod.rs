//! Patient records and everything that turns them into model inputs.
//!
//! A cohort is a list of [`PatientRecord`]s. Records are serialized one JSON
//! object per line; field order and map ordering are fixed so that
//! serialize -> parse -> serialize reproduces the file byte for byte.

mod batch;
mod cache;
mod delta;
mod ingest;
mod split;
mod synth;
mod vocab;

pub use batch::{
    extract_pretrain_windows, make_batch, make_pretrain_batch, BatchTargets, BatchTask, PretrainWindow,
    SequenceBatch, CATEGORY_PREFIXES, NUM_DIAG_CATEGORIES, TOPCAP,
};
pub use cache::{read_batch_cache, write_batch_cache};
pub use delta::{bucketize_delta_tau, compute_delta_tau, DELTA_TAU_BUCKETS};
pub use ingest::{assign_subgroup_by_marker, ingest_csv, ColumnMap};
pub use split::{temporal_split, CohortSplit};
pub use synth::{generate_synthetic_cohort, SynthConfig};
pub use vocab::{Vocabulary, PAD_ID, UNK_ID};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    U,
}

/// One encounter: the codes recorded for it, in recording priority order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub visit_id: String,
    pub date: NaiveDate,
    pub codes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub length_of_stay_days: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub died_this_admission: Option<bool>,
}

/// A patient's full history. Visits are date-ordered; [`PatientRecord::validate`]
/// enforces that plus label consistency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub age_at_first_visit: u32,
    pub sex: Sex,
    pub subgroup_labels: BTreeSet<String>,
    pub first_diagnosis_date: BTreeMap<String, NaiveDate>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        for w in self.visits.windows(2) {
            if w[1].date < w[0].date {
                return Err(Error::Data(format!(
                    "patient {}: visits out of date order ({} after {})",
                    self.patient_id, w[0].date, w[1].date
                )));
            }
        }
        for label in self.first_diagnosis_date.keys() {
            if !self.subgroup_labels.contains(label) {
                return Err(Error::Data(format!(
                    "patient {}: diagnosis date for unlisted subgroup {label}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }

    pub fn first_visit_date(&self) -> Option<NaiveDate> {
        self.visits.first().map(|v| v.date)
    }
}

// ── Cohort files ────────────────────────────────────────────────────────────

/// Serialize a cohort to JSONL bytes (one record per line).
pub fn cohort_to_jsonl(records: &[PatientRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(format!("serialize {}: {e}", r.patient_id)))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parse a JSONL cohort, validating every record. Errors carry line numbers.
pub fn cohort_from_jsonl(bytes: &[u8]) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("cohort line {}: {e}", i + 1)))?;
        rec.validate().map_err(|e| Error::Data(format!("cohort line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data("cohort file contains no records".into()));
    }
    Ok(records)
}

pub fn write_cohort(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let bytes = cohort_to_jsonl(records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_cohort(path: &Path) -> Result<Vec<PatientRecord>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read cohort {}: {e}", path.display())))?;
    cohort_from_jsonl(&bytes)
}

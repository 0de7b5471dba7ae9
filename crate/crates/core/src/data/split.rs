//! Diagnosis-year cohort splits.
//!
//! Subgroup members are assigned by the calendar year of their first
//! diagnosis: earlier years feed the train/validation pool, one later year is
//! held out whole as the test set. This keeps evaluation strictly forward in
//! time relative to everything trained on.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use chrono::Datelike;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PatientRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub subgroup: String,
    pub train_years: (i32, i32),
    pub test_year: i32,
    pub val_fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn temporal_split(
    records: &[PatientRecord],
    subgroup: &str,
    train_years: RangeInclusive<i32>,
    test_year: i32,
    val_fraction: f64,
    seed: u64,
) -> Result<CohortSplit> {
    if train_years.contains(&test_year) {
        return Err(Error::Config(format!("test year {test_year} overlaps the training years")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut pool: Vec<&str> = Vec::new();
    let mut test: Vec<String> = Vec::new();
    for r in records {
        let Some(d) = r.first_diagnosis_date.get(subgroup) else { continue };
        let year = d.year();
        if train_years.contains(&year) {
            pool.push(&r.patient_id);
        } else if year == test_year {
            test.push(r.patient_id.clone());
        }
    }
    if pool.is_empty() {
        return Err(Error::Data(format!("no {subgroup} members diagnosed in the training years")));
    }
    if test.is_empty() {
        return Err(Error::Data(format!("no {subgroup} members diagnosed in test year {test_year}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.sort_unstable();
    pool.shuffle(&mut rng);
    let n_val = (pool.len() as f64 * val_fraction).floor() as usize;
    let mut validation: Vec<String> = pool[..n_val].iter().map(|s| s.to_string()).collect();
    let mut train: Vec<String> = pool[n_val..].iter().map(|s| s.to_string()).collect();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();

    Ok(CohortSplit {
        subgroup: subgroup.to_string(),
        train_years: (*train_years.start(), *train_years.end()),
        test_year,
        val_fraction,
        seed,
        train,
        validation,
        test,
    })
}

impl CohortSplit {
    /// Resolve id lists back to records. Ids missing from the cohort are an
    /// error: a split manifest only makes sense against the cohort it came from.
    pub fn materialize<'a>(
        &self,
        records: &'a [PatientRecord],
    ) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>, Vec<&'a PatientRecord>)> {
        let by_id: HashMap<&str, &PatientRecord> =
            records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
        let resolve = |ids: &[String]| -> Result<Vec<&'a PatientRecord>> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| {
                        Error::Data(format!("split references unknown patient {id}"))
                    })
                })
                .collect()
        };
        Ok((resolve(&self.train)?, resolve(&self.validation)?, resolve(&self.test)?))
    }
}

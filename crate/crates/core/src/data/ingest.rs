//! Row-level CSV ingestion.
//!
//! Input is one code per row; rows sharing (patient, visit) ids are grouped
//! into visits, visits into records. Rows may arrive in any order; codes keep
//! their row order within a visit, which is taken as recording priority.

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;

use super::{PatientRecord, Sex, Visit};
use crate::error::{Error, Result};

/// Header names to read each field from. Only the first four are required to
/// exist in the file; the rest are used when present.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub patient_id: String,
    pub visit_id: String,
    pub date: String,
    pub code: String,
    pub length_of_stay: String,
    pub died: String,
    pub age: String,
    pub sex: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            patient_id: "patient_id".into(),
            visit_id: "visit_id".into(),
            date: "date".into(),
            code: "code".into(),
            length_of_stay: "los".into(),
            died: "died".into(),
            age: "age".into(),
            sex: "sex".into(),
        }
    }
}

struct VisitDraft {
    visit_id: String,
    date: NaiveDate,
    codes: Vec<String>,
    los: Option<u32>,
    died: Option<bool>,
}

struct PatientDraft {
    visit_order: Vec<String>,
    visits: HashMap<String, VisitDraft>,
    age: Option<u32>,
    sex: Option<Sex>,
}

pub fn ingest_csv(path: &Path, map: &ColumnMap) -> Result<Vec<PatientRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| {
        col(name).ok_or_else(|| Error::Schema(format!("missing required column '{name}'")))
    };
    let c_pid = required(&map.patient_id)?;
    let c_vid = required(&map.visit_id)?;
    let c_date = required(&map.date)?;
    let c_code = required(&map.code)?;
    let c_los = col(&map.length_of_stay);
    let c_died = col(&map.died);
    let c_age = col(&map.age);
    let c_sex = col(&map.sex);

    let mut patient_order: Vec<String> = Vec::new();
    let mut patients: HashMap<String, PatientDraft> = HashMap::new();

    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("csv parse: {e}")))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let pid = field(c_pid);
        let vid = field(c_vid);
        let code = field(c_code);
        if pid.is_empty() || vid.is_empty() || code.is_empty() {
            return Err(Error::Data(format!("line {line}: empty patient, visit, or code field")));
        }
        let date = NaiveDate::parse_from_str(field(c_date), "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("line {line}: bad date '{}': {e}", field(c_date))))?;

        let patient = patients.entry(pid.to_string()).or_insert_with(|| {
            patient_order.push(pid.to_string());
            PatientDraft { visit_order: Vec::new(), visits: HashMap::new(), age: None, sex: None }
        });
        if let Some(i) = c_age {
            if patient.age.is_none() && !field(i).is_empty() {
                let age = field(i)
                    .parse()
                    .map_err(|e| Error::Data(format!("line {line}: bad age '{}': {e}", field(i))))?;
                patient.age = Some(age);
            }
        }
        if let Some(i) = c_sex {
            if patient.sex.is_none() && !field(i).is_empty() {
                patient.sex = Some(match field(i) {
                    "M" | "m" => Sex::M,
                    "F" | "f" => Sex::F,
                    other => {
                        return Err(Error::Data(format!("line {line}: unknown sex '{other}'")));
                    }
                });
            }
        }

        let visit = patient.visits.entry(vid.to_string()).or_insert_with(|| {
            patient.visit_order.push(vid.to_string());
            VisitDraft { visit_id: vid.to_string(), date, codes: Vec::new(), los: None, died: None }
        });
        if visit.date != date {
            return Err(Error::Data(format!(
                "line {line}: visit {vid} has conflicting dates {} and {date}",
                visit.date
            )));
        }
        visit.codes.push(code.to_string());
        if let Some(i) = c_los {
            if visit.los.is_none() && !field(i).is_empty() {
                let los = field(i)
                    .parse()
                    .map_err(|e| Error::Data(format!("line {line}: bad stay length '{}': {e}", field(i))))?;
                visit.los = Some(los);
            }
        }
        if let Some(i) = c_died {
            if visit.died.is_none() && !field(i).is_empty() {
                visit.died = Some(match field(i).to_ascii_lowercase().as_str() {
                    "1" | "true" | "t" | "yes" => true,
                    "0" | "false" | "f" | "no" => false,
                    other => {
                        return Err(Error::Data(format!("line {line}: bad died flag '{other}'")));
                    }
                });
            }
        }
    }
    if patient_order.is_empty() {
        return Err(Error::Data(format!("{} holds no data rows", path.display())));
    }

    let mut records = Vec::with_capacity(patient_order.len());
    for pid in patient_order {
        let draft = patients.remove(&pid).expect("tracked patient");
        let mut visits: Vec<Visit> = draft
            .visit_order
            .iter()
            .map(|vid| {
                let v = &draft.visits[vid];
                Visit {
                    visit_id: v.visit_id.clone(),
                    date: v.date,
                    codes: v.codes.clone(),
                    length_of_stay_days: v.los,
                    died_this_admission: v.died,
                }
            })
            .collect();
        visits.sort_by_key(|v| v.date);
        let record = PatientRecord {
            patient_id: pid,
            visits,
            age_at_first_visit: draft.age.unwrap_or(0),
            sex: draft.sex.unwrap_or(Sex::U),
            subgroup_labels: Default::default(),
            first_diagnosis_date: Default::default(),
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Mark records containing `marker` as members of `label`, dating the
/// diagnosis to the first visit that carries the marker.
pub fn assign_subgroup_by_marker(records: &mut [PatientRecord], label: &str, marker: &str) {
    for r in records.iter_mut() {
        if let Some(v) = r.visits.iter().find(|v| v.codes.iter().any(|c| c == marker)) {
            r.subgroup_labels.insert(label.to_string());
            r.first_diagnosis_date.insert(label.to_string(), v.date);
        }
    }
}

//! Synthetic EMR cohort with a planted subgroup signal.
//!
//! Each patient gets a latent severity `z ~ Gamma(2, 1)` that drives visit
//! rates, chronic-code share, stay lengths, and mortality risk. Subgroup
//! members additionally get a diagnosis visit on the first day of a drawn
//! calendar year; visit counts in the year that follows it jump by a
//! configured shift on top of the severity and chronic-history terms, so the
//! subgroup's next-year counts diverge visibly from the background cohort.
//!
//! Every draw comes from a per-patient stream seeded by (seed, patient index),
//! so output is stable under reordering and cohort resizing. Visit dates use
//! day offsets 0..365 within each calendar year; target windows of 365 days
//! starting January 1 therefore line up with generation years even across
//! leap years.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use super::batch::{diag_category, TOPCAP};
use super::{PatientRecord, Sex, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_background: usize,
    pub n_subgroup: usize,
    /// Calendar years of history per patient.
    pub horizon_years: usize,
    pub start_year: i32,
    pub subgroup_label: String,
    /// Code planted on the diagnosis visit; starts with 'D' so it never counts
    /// toward the chronic chapters.
    pub marker_code: String,
    /// Visits per ordinary year: Poisson(base + severity_slope * z).
    pub base_visit_rate: f64,
    pub severity_visit_rate: f64,
    /// Visits in the target year: Poisson(base + severity * z + chronic * c),
    /// where c is the previous year's count of visits carrying a chronic code.
    pub target_base: f64,
    pub target_severity: f64,
    pub target_chronic: f64,
    /// Added to the subgroup's target-year rate.
    pub subgroup_shift: f64,
    /// Codes per visit: 1 + Poisson(mean_extra_codes).
    pub mean_extra_codes: f64,
    /// Stay length: 1 + Poisson(mean_extra_los + z).
    pub mean_extra_los: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_background: 1000,
            n_subgroup: 200,
            horizon_years: 7,
            start_year: 2012,
            subgroup_label: "BP".into(),
            marker_code: "DX-BP".into(),
            base_visit_rate: 2.0,
            severity_visit_rate: 3.0,
            target_base: 1.0,
            target_severity: 2.0,
            target_chronic: 0.5,
            subgroup_shift: 10.0,
            mean_extra_codes: 3.0,
            mean_extra_los: 2.0,
        }
    }
}

const CHRONIC_CHAPTERS: [char; 6] = ['C', 'E', 'G', 'I', 'J', 'K'];
const CODES_PER_CHAPTER: usize = 20;
const N_ROUTINE: usize = 40;
const N_SPECIALTY: usize = 20;
const N_PROCEDURE: usize = 20;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn patient_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)))
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    let p = Poisson::new(lambda.max(1e-9)).expect("positive rate");
    let n: f64 = p.sample(rng);
    n as usize
}

struct CodeTable {
    chronic: Vec<String>,
    routine: Vec<String>,
    specialty: Vec<String>,
    procedure: Vec<String>,
}

impl CodeTable {
    fn new() -> Self {
        let chronic = CHRONIC_CHAPTERS
            .iter()
            .flat_map(|ch| (0..CODES_PER_CHAPTER).map(move |i| format!("{ch}{i:02}")))
            .collect();
        CodeTable {
            chronic,
            routine: (0..N_ROUTINE).map(|i| format!("Z{i:02}")).collect(),
            specialty: (0..N_SPECIALTY).map(|i| format!("SPEC-{i:02}")).collect(),
            procedure: (0..N_PROCEDURE).map(|i| format!("PROC-{i:02}")).collect(),
        }
    }

    /// Chronic share rises with severity; the other pools are flat.
    fn draw(&self, rng: &mut ChaCha8Rng, z: f64) -> &str {
        let w_chronic = 1.0 + 0.75 * z;
        let weights = [w_chronic, 2.0, 0.5, 0.5];
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (pool, w) in [&self.chronic, &self.routine, &self.specialty, &self.procedure]
            .iter()
            .zip(weights)
        {
            if u < w {
                return &pool[rng.gen_range(0..pool.len())];
            }
            u -= w;
        }
        self.routine.last().unwrap()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn generate_synthetic_cohort(cfg: &SynthConfig, seed: u64) -> Result<Vec<PatientRecord>> {
    if cfg.horizon_years < 3 {
        return Err(Error::Config("horizon must cover at least 3 years".into()));
    }
    if cfg.n_background + cfg.n_subgroup == 0 {
        return Err(Error::Config("cohort size is zero".into()));
    }
    let codes = CodeTable::new();
    let n_total = cfg.n_background + cfg.n_subgroup;
    let mut out = Vec::with_capacity(n_total);
    for idx in 0..n_total {
        let is_member = idx >= cfg.n_background;
        out.push(generate_patient(cfg, &codes, seed, idx as u64, is_member));
    }
    Ok(out)
}

fn year_start(cfg: &SynthConfig, year_index: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(cfg.start_year + year_index as i32, 1, 1).expect("valid year")
}

fn generate_patient(
    cfg: &SynthConfig,
    codes: &CodeTable,
    seed: u64,
    idx: u64,
    is_member: bool,
) -> PatientRecord {
    let mut rng = patient_rng(seed, idx);
    let gamma = Gamma::new(2.0, 1.0).expect("gamma params");
    let z: f64 = gamma.sample(&mut rng);
    let age: u32 = rng.gen_range(65..95);
    let sex = if rng.gen_bool(0.5) { Sex::F } else { Sex::M };
    let h = cfg.horizon_years;
    // target year: the year after diagnosis for members, the final year otherwise
    let diag_year = if is_member { rng.gen_range(1..h) } else { h - 1 };

    // (date, codes) accumulated year by year; chronic visit count feeds forward
    let mut drafts: Vec<(NaiveDate, Vec<String>)> = Vec::new();
    let mut chronic_prev = 0usize;
    for year in 0..h {
        let start = year_start(cfg, year);
        let n = if year == diag_year {
            let mut rate = cfg.target_base
                + cfg.target_severity * z
                + cfg.target_chronic * chronic_prev as f64;
            if is_member {
                rate += cfg.subgroup_shift;
            }
            let drawn = poisson(&mut rng, rate);
            if is_member {
                drawn.min(TOPCAP as usize - 1) // diagnosis visit itself completes the year
            } else {
                drawn.min(TOPCAP as usize)
            }
        } else {
            poisson(&mut rng, cfg.base_visit_rate + cfg.severity_visit_rate * z)
        };
        let mut year_visits: Vec<(NaiveDate, Vec<String>)> = Vec::with_capacity(n + 1);
        if is_member && year == diag_year {
            let k = 1 + poisson(&mut rng, cfg.mean_extra_codes);
            let mut vcodes = vec![cfg.marker_code.clone()];
            for _ in 0..k.saturating_sub(1) {
                vcodes.push(codes.draw(&mut rng, z).to_string());
            }
            year_visits.push((start, vcodes));
        }
        for _ in 0..n {
            let day = rng.gen_range(0..365u64);
            let k = 1 + poisson(&mut rng, cfg.mean_extra_codes);
            let vcodes = (0..k).map(|_| codes.draw(&mut rng, z).to_string()).collect();
            year_visits.push((start + Days::new(day), vcodes));
        }
        chronic_prev = year_visits
            .iter()
            .filter(|(_, cs)| cs.iter().any(|c| diag_category(c).is_some()))
            .count();
        drafts.extend(year_visits);
    }
    if drafts.is_empty() {
        // tiny-severity patients can draw zero visits everywhere
        let k = 1 + poisson(&mut rng, cfg.mean_extra_codes);
        let vcodes = (0..k).map(|_| codes.draw(&mut rng, z).to_string()).collect();
        drafts.push((year_start(cfg, 0) + Days::new(rng.gen_range(0..365u64)), vcodes));
    }
    drafts.sort_by_key(|(d, _)| *d);

    let died = rng.gen_bool(sigmoid(-2.5 + 0.3 * (z - 2.0) + 0.02 * (age as f64 - 75.0)));
    let n_visits = drafts.len();
    let patient_id = format!("p{idx:06}");
    let visits: Vec<Visit> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (date, vcodes))| Visit {
            visit_id: format!("{patient_id}-v{i:03}"),
            date,
            codes: vcodes,
            length_of_stay_days: Some(1 + poisson(&mut rng, cfg.mean_extra_los + z) as u32),
            died_this_admission: Some(died && i == n_visits - 1),
        })
        .collect();

    let mut record = PatientRecord {
        patient_id,
        visits,
        age_at_first_visit: age,
        sex,
        subgroup_labels: Default::default(),
        first_diagnosis_date: Default::default(),
    };
    if is_member {
        record.subgroup_labels.insert(cfg.subgroup_label.clone());
        record
            .first_diagnosis_date
            .insert(cfg.subgroup_label.clone(), year_start(cfg, diag_year));
    }
    record
}

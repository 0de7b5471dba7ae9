//! Inter-visit gaps and their bucketed encoding.
//!
//! Gaps are embedded from a small closed vocabulary rather than as raw day
//! counts: exact ids for short gaps, coarser steps as the gap grows.

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Bucket ids: 0..=30 exact days, 31..=52 weekly, 53..=59 monthly, 60 = over a year.
pub const DELTA_TAU_BUCKETS: usize = 61;

/// Days since the previous visit for each date in a window; the first entry is 0.
pub fn compute_delta_tau(dates: &[NaiveDate]) -> Vec<i64> {
    let mut out = Vec::with_capacity(dates.len());
    for (i, d) in dates.iter().enumerate() {
        if i == 0 {
            out.push(0);
        } else {
            out.push((*d - dates[i - 1]).num_days());
        }
    }
    out
}

/// Map a non-negative day gap to its bucket id.
pub fn bucketize_delta_tau(days: i64) -> Result<usize> {
    if days < 0 {
        return Err(Error::Data(format!("negative inter-visit gap: {days} days")));
    }
    Ok(match days {
        0..=30 => days as usize,
        31..=180 => 31 + (days as usize - 31) / 7,
        181..=365 => 53 + (days as usize - 181) / 30,
        _ => 60,
    })
}

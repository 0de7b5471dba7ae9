//! On-disk batch cache.
//!
//! Little-endian layout: `SANS` magic, format version, the four header counts
//! (b, t, v, skipped), a target-presence bitmask, then the arrays in struct
//! order. Reads reject wrong magic, unknown versions, and trailing bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::batch::{BatchTargets, SequenceBatch, NUM_DIAG_CATEGORIES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SANS";
const VERSION: u32 = 1;

const FLAG_COUNT: u8 = 1;
const FLAG_DIAG: u8 = 1 << 1;
const FLAG_DEATH: u8 = 1 << 2;
const FLAG_LOS: u8 = 1 << 3;

pub fn write_batch_cache(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for n in [batch.b, batch.t, batch.v, batch.skipped] {
        put_u32(&mut out, u32::try_from(n).map_err(|_| Error::Data("batch too large for cache header".into()))?);
    }
    let mut flags = 0u8;
    if batch.targets.y_count.is_some() {
        flags |= FLAG_COUNT;
    }
    if batch.targets.y_diag.is_some() {
        flags |= FLAG_DIAG;
    }
    if batch.targets.y_death.is_some() {
        flags |= FLAG_DEATH;
    }
    if batch.targets.y_los.is_some() {
        flags |= FLAG_LOS;
    }
    out.push(flags);
    for x in &batch.code_ids {
        put_u32(&mut out, *x);
    }
    for x in &batch.delta_bucket {
        put_u32(&mut out, *x);
    }
    out.extend_from_slice(&batch.visit_mask);
    out.extend_from_slice(&batch.code_mask);
    if let Some(y) = &batch.targets.y_count {
        put_f64s(&mut out, y);
    }
    if let Some(y) = &batch.targets.y_diag {
        put_f64s(&mut out, y);
    }
    if let Some(y) = &batch.targets.y_death {
        put_f64s(&mut out, y);
    }
    if let Some(y) = &batch.targets.y_los {
        put_f64s(&mut out, y);
        out.extend_from_slice(batch.targets.los_mask.as_deref().unwrap_or(&[]));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_batch_cache(path: &Path) -> Result<SequenceBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Cursor { bytes: &bytes, pos: 0 };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!("not a batch cache: bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported batch cache version {version}")));
    }
    let b = r.u32()? as usize;
    let t = r.u32()? as usize;
    let v = r.u32()? as usize;
    let skipped = r.u32()? as usize;
    let flags = r.take(1)?[0];

    let code_ids = r.u32s(b * t * v)?;
    let delta_bucket = r.u32s(b * t)?;
    let visit_mask = r.take(b * t)?.to_vec();
    let code_mask = r.take(b * t * v)?.to_vec();
    let mut targets = BatchTargets::default();
    if flags & FLAG_COUNT != 0 {
        targets.y_count = Some(r.f64s(b)?);
    }
    if flags & FLAG_DIAG != 0 {
        targets.y_diag = Some(r.f64s(b * NUM_DIAG_CATEGORIES)?);
    }
    if flags & FLAG_DEATH != 0 {
        targets.y_death = Some(r.f64s(b)?);
    }
    if flags & FLAG_LOS != 0 {
        targets.y_los = Some(r.f64s(b * t)?);
        targets.los_mask = Some(r.take(b * t)?.to_vec());
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("batch cache has {} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(SequenceBatch { b, t, v, code_ids, delta_bucket, visit_mask, code_mask, targets, skipped })
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("batch cache truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))).collect()
    }
}

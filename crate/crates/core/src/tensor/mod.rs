//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Values are stored as `f64` throughout. The engine-wide [`Precision`] flag
//! selects whether op results are additionally rounded through `f32`
//! ([`Precision::Single`], the training default) or kept at full double
//! ([`Precision::Double`], used by every numerical check). Accumulations
//! always run in double; only stored results are quantized.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_multi, FdReport, DEFAULT_FD_EPS};
pub use tape::{Gradients, NodeId, Tape};

use std::sync::atomic::{AtomicU8, Ordering};

use crate::error::{Error, Result};

// ── Precision flag ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

static PRECISION: AtomicU8 = AtomicU8::new(0);

/// Set the engine-wide default precision picked up by `Tape::new`.
/// Tapes capture the flag at construction; in-flight tapes are unaffected.
pub fn set_precision(p: Precision) {
    PRECISION.store(if p == Precision::Single { 1 } else { 0 }, Ordering::Relaxed);
}

pub fn precision() -> Precision {
    if PRECISION.load(Ordering::Relaxed) == 1 {
        Precision::Single
    } else {
        Precision::Double
    }
}

/// Round a value through `f32` when running single precision.
#[inline]
pub(crate) fn quantize(v: f64, single: bool) -> f64 {
    if single {
        v as f32 as f64
    } else {
        v
    }
}

// ── Tensor ──────────────────────────────────────────────────────────────────

/// A dense row-major tensor. Plain value type: tensors not registered on a
/// tape are immutable data and safe to share or cache.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Multi-index accessor; intended for tests and small fixtures.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range for axis {i} of {:?}", self.shape);
            off = off * d + ix;
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Quantize every element through `f32`. Used by the optimizer so that
    /// single-precision training keeps parameters representable in `f32`.
    pub fn quantize_single(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

// ── Shape helpers shared by tape ops ─────────────────────────────────────────

/// Right-aligned broadcast of two shapes; errors name both operands.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Dim(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 on axes the shape broadcasts along when padded
/// to `out_rank` dims of `out_shape`.
pub(crate) fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        natural[i] = s;
        s *= shape[i];
    }
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..out_shape.len() {
        // missing and size-1 axes broadcast: they keep stride 0
        if i >= pad && shape[i - pad] == out_shape[i] {
            out[i] = natural[i - pad];
        }
    }
    out
}

/// Sum `g` (of shape `g_shape`) down to `target` by collapsing broadcast axes.
pub(crate) fn reduce_to_shape(g: &[f64], g_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if g_shape == target {
        return g.to_vec();
    }
    let numel_t: usize = target.iter().product();
    let mut out = vec![0.0; numel_t];
    let strides_t = bcast_strides(target, g_shape);
    let mut idx = vec![0usize; g_shape.len()];
    let mut off_t = 0usize;
    for (i, &v) in g.iter().enumerate() {
        out[off_t] += v;
        if i + 1 < g.len() {
            // odometer increment, maintaining the target offset
            for ax in (0..g_shape.len()).rev() {
                idx[ax] += 1;
                off_t += strides_t[ax];
                if idx[ax] < g_shape[ax] {
                    break;
                }
                off_t -= strides_t[ax] * g_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    out
}

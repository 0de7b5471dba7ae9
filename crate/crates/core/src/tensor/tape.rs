//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation pushes one node holding its result and the ids of its
//! inputs. Ids only ever point backwards, so a single reverse sweep over the
//! node list visits consumers before producers. Gradients accumulate
//! additively; a tensor used twice receives the sum of both paths.

use crate::error::{Error, Result};

use super::{bcast_strides, broadcast_shapes, quantize, reduce_to_shape, precision, Precision, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

// ── Ops ─────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach { x: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    NarrowLast { x: NodeId, start: usize, len: usize },
    ConcatLast { xs: Vec<NodeId> },
    SumAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    CausalMask { x: NodeId },
    Reshape { x: NodeId },
    TakeSteps { x: NodeId, steps: Vec<usize> },
    PoissonNll { pred: NodeId, y: Vec<f64>, w: Vec<f64> },
    BceWithLogits { logits: NodeId, y: Vec<f64>, w: Vec<f64> },
    Huber { pred: NodeId, y: Vec<f64>, delta: f64, w: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    g: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.g.get(id).and_then(|t| t.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.g.get_mut(id).and_then(|t| t.take())
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

pub struct Tape {
    nodes: Vec<Node>,
    single: bool,
    macs: u64,
}

impl Tape {
    /// Capture the engine-wide precision flag at construction.
    pub fn new() -> Self {
        Tape::with_precision(precision())
    }

    pub fn with_precision(p: Precision) -> Self {
        Tape { nodes: Vec::new(), single: p == Precision::Single, macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply–accumulate operations executed so far (matmuls and axis
    /// reductions; elementwise maps are not counted).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Register a leaf that will receive a gradient.
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Register a leaf excluded from differentiation (masks, encodings, ...).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    #[inline]
    fn q(&self, v: f64) -> f64 {
        quantize(v, self.single)
    }

    // ── Forward ops ──────────────────────────────────────────────────────────

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, Op::Detach { x }, false)
    }

    /// Matrix product on the two trailing axes; leading axes broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dim(format!("matmul needs rank >= 2 operands, got {sa:?} x {sb:?}")));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::Dim(format!("matmul inner dims disagree: {sa:?} x {sb:?}")));
        }
        let lead = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let nlead: usize = lead.iter().product();
        let str_a = bcast_strides(&sa[..sa.len() - 2], &lead);
        let str_b = bcast_strides(&sb[..sb.len() - 2], &lead);

        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; nlead * m * n];
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        for_each_lead(&lead, &str_a, &str_b, |li, oa, ob| {
            mm_nn(&mut out[li * m * n..(li + 1) * m * n], &da[oa * m * ka..], &db[ob * ka * n..], m, ka, n);
        });
        if self.single {
            for v in &mut out {
                *v = *v as f32 as f64;
            }
        }
        self.macs += (nlead * m * ka * n) as u64;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Multiply by a plain scalar (recorded as a constant).
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(x, k)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape().to_vec(), self.nodes[b].value.shape().to_vec());
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let out = if sa == sb {
            let mut out = Vec::with_capacity(da.len());
            for i in 0..da.len() {
                out.push(self.q(f(da[i], db[i])));
            }
            Tensor::new(sa, out)?
        } else {
            let shape = broadcast_shapes(&sa, &sb)?;
            let va = bcast_gather(da, &sa, &shape);
            let vb = bcast_gather(db, &sb, &shape);
            let out: Vec<f64> = va.iter().zip(&vb).map(|(&x, &y)| self.q(f(x, y))).collect();
            Tensor::new(shape, out)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, op, needs))
    }

    /// Exact Gaussian-CDF gelu: `x * Phi(x)` via the error function, so the
    /// derivative `Phi(x) + x * phi(x)` carries no approximation error into
    /// finite-difference comparisons.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.data();
        let out: Vec<f64> = v.iter().map(|&t| self.q(t * gauss_cdf(t))).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data: out }, Op::Gelu { x }, needs)
    }

    /// Layer normalization over the last axis, with learned gain and bias of
    /// that axis's extent. A zero-variance row normalizes to zero and so maps
    /// to the bias (epsilon 1e-5 keeps the division defined).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::Dim("layer_norm on rank-0 tensor".into()))?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.nodes[id].value.shape();
            if s != [d] {
                return Err(Error::Dim(format!("layer_norm {name} shape {s:?} does not match last axis of {sx:?}")));
            }
        }
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gain].value.data();
        let bv = self.nodes[bias].value.data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..d {
                out[r * d + i] = self.q((seg[i] - mean) * inv * gv[i] + bv[i]);
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(Tensor::new(sx, out)?, Op::LayerNorm { x, gain, bias }, needs))
    }

    /// Row lookup into a `[rows, width]` table. `ids` are row indices laid out
    /// in `ids_shape` order; the result has shape `ids_shape ++ [width]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> Result<NodeId> {
        let st = self.nodes[table].value.shape();
        if st.len() != 2 {
            return Err(Error::Dim(format!("gather_rows table must be rank 2, got {st:?}")));
        }
        let (rows, width) = (st[0], st[1]);
        let count: usize = ids_shape.iter().product();
        if count != ids.len() {
            return Err(Error::Dim(format!("ids_shape {ids_shape:?} implies {count} ids, got {}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("gather_rows id {bad} out of range for table with {rows} rows")));
        }
        let tv = self.nodes[table].value.data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &r in ids {
            out.extend_from_slice(&tv[r * width..(r + 1) * width]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(width);
        let needs = self.needs(&[table]);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { table, ids: ids.to_vec() }, needs))
    }

    /// Contiguous slice `start..start+len` of the last axis.
    pub fn narrow_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| Error::Dim("narrow_last on rank-0 tensor".into()))?;
        if start + len > d {
            return Err(Error::Dim(format!("narrow_last {start}..{} exceeds last axis of {sx:?}", start + len)));
        }
        let xv = self.nodes[x].value.data();
        let rows = xv.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NarrowLast { x, start, len }, needs))
    }

    /// Split the last axis in two equal halves. The backward pass of the two
    /// halves scatters into disjoint ranges of the input, so their gradients
    /// concatenate back exactly.
    pub fn split_last(&mut self, x: NodeId) -> Result<(NodeId, NodeId)> {
        let sx = self.nodes[x].value.shape();
        let d = *sx.last().ok_or_else(|| Error::Dim("split_last on rank-0 tensor".into()))?;
        if d % 2 != 0 {
            return Err(Error::Dim(format!("split_last needs an even last axis, got {sx:?}")));
        }
        let a = self.narrow_last(x, 0, d / 2)?;
        let b = self.narrow_last(x, d / 2, d / 2)?;
        Ok((a, b))
    }

    /// Concatenate along the last axis. All other axes must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Dim("concat_last of zero tensors".into()));
        }
        let lead = self.nodes[xs[0]].value.shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &id in xs {
            let s = self.nodes[id].value.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dim(format!(
                    "concat_last leading axes disagree: {:?} vs {:?}",
                    self.nodes[xs[0]].value.shape(),
                    s
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (j, &id) in xs.iter().enumerate() {
                let d = widths[j];
                let xv = self.nodes[id].value.data();
                out.extend_from_slice(&xv[r * d..(r + 1) * d]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = self.needs(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatLast { xs: xs.to_vec() }, needs))
    }

    /// Sum over one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if axis >= sx.len() {
            return Err(Error::Dim(format!("sum_axis axis {axis} out of range for {sx:?}")));
        }
        let outer: usize = sx[..axis].iter().product();
        let mid = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xv[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[i];
                }
            }
        }
        if self.single {
            for v in &mut out {
                *v = *v as f32 as f64;
            }
        }
        self.macs += xv.len() as u64;
        let mut shape = sx;
        shape.remove(axis);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, needs))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.data();
        let s = self.q(xv.iter().sum());
        self.macs += xv.len() as u64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Zero the strict upper triangle of a square matrix, keeping the
    /// diagonal. Masked entries are exactly 0.0, never a tiny residue, so
    /// future positions contribute nothing even at the bit level.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 2 || sx[0] != sx[1] {
            return Err(Error::Dim(format!("causal_mask needs a square matrix, got {sx:?}")));
        }
        let l = sx[0];
        let xv = self.nodes[x].value.data();
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            out[i * l..i * l + i + 1].copy_from_slice(&xv[i * l..i * l + i + 1]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(sx, out)?, Op::CausalMask { x }, needs))
    }

    /// Reinterpret the layout; element count must be preserved.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.numel() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.nodes[x].value.shape()
            )));
        }
        let data = self.nodes[x].value.data().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape { x }, needs))
    }

    /// Per-row step selection: from `[B, T, ...]` pick `x[b, steps[b], ...]`,
    /// yielding `[B, ...]`. Used to read features at each sequence's last
    /// valid step.
    pub fn take_steps(&mut self, x: NodeId, steps: &[usize]) -> Result<NodeId> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() < 2 {
            return Err(Error::Dim(format!("take_steps needs rank >= 2, got {sx:?}")));
        }
        let (b, t) = (sx[0], sx[1]);
        if steps.len() != b {
            return Err(Error::Dim(format!("take_steps got {} steps for batch {b}", steps.len())));
        }
        if let Some(&bad) = steps.iter().find(|&&s| s >= t) {
            return Err(Error::Index(format!("take_steps step {bad} out of range for {t} steps")));
        }
        let rest: usize = sx[2..].iter().product();
        let xv = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(b * rest);
        for (bi, &s) in steps.iter().enumerate() {
            out.extend_from_slice(&xv[(bi * t + s) * rest..(bi * t + s + 1) * rest]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&sx[2..]);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::TakeSteps { x, steps: steps.to_vec() }, needs))
    }

    // ── Losses (fused, scalar output) ────────────────────────────────────────

    /// Poisson regression loss on log-rate predictions:
    /// weighted mean of `exp(pred) - y * pred`. Gradient is `lambda - y`.
    /// The `ln(y!)` term is constant in the parameters and lives in the
    /// reporting metric instead.
    pub fn poisson_nll(&mut self, pred: NodeId, y: &[f64], weights: Option<&[f64]>) -> Result<NodeId> {
        let (yv, wv) = self.loss_args(pred, y, weights, "poisson_nll")?;
        let pv = self.nodes[pred].value.data();
        let wsum: f64 = wv.iter().sum();
        let mut acc = 0.0;
        for i in 0..pv.len() {
            acc += wv[i] * (pv[i].exp() - yv[i] * pv[i]);
        }
        let out = self.q(acc / wsum);
        let needs = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(out), Op::PoissonNll { pred, y: yv, w: wv }, needs))
    }

    /// Numerically stable binary cross-entropy on logits:
    /// weighted mean of `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: NodeId, y: &[f64], weights: Option<&[f64]>) -> Result<NodeId> {
        let (yv, wv) = self.loss_args(logits, y, weights, "bce_with_logits")?;
        let xv = self.nodes[logits].value.data();
        let wsum: f64 = wv.iter().sum();
        let mut acc = 0.0;
        for i in 0..xv.len() {
            let x = xv[i];
            acc += wv[i] * (x.max(0.0) - x * yv[i] + (-x.abs()).exp().ln_1p());
        }
        let out = self.q(acc / wsum);
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(out), Op::BceWithLogits { logits, y: yv, w: wv }, needs))
    }

    /// Huber loss: quadratic inside `delta`, linear outside.
    pub fn huber(&mut self, pred: NodeId, y: &[f64], delta: f64, weights: Option<&[f64]>) -> Result<NodeId> {
        if delta <= 0.0 {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        let (yv, wv) = self.loss_args(pred, y, weights, "huber")?;
        let pv = self.nodes[pred].value.data();
        let wsum: f64 = wv.iter().sum();
        let mut acc = 0.0;
        for i in 0..pv.len() {
            let e = pv[i] - yv[i];
            acc += wv[i] * if e.abs() <= delta { 0.5 * e * e } else { delta * (e.abs() - 0.5 * delta) };
        }
        let out = self.q(acc / wsum);
        let needs = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(out), Op::Huber { pred, y: yv, delta, w: wv }, needs))
    }

    fn loss_args(&self, pred: NodeId, y: &[f64], weights: Option<&[f64]>, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.nodes[pred].value.numel();
        if y.len() != n {
            return Err(Error::Dim(format!(
                "{name}: predictions {:?} vs {} targets",
                self.nodes[pred].value.shape(),
                y.len()
            )));
        }
        let w = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Dim(format!("{name}: {n} predictions vs {} weights", w.len())));
                }
                w.to_vec()
            }
            None => vec![1.0; n],
        };
        let wsum: f64 = w.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Data(format!("{name}: loss weights sum to {wsum}; no valid targets")));
        }
        Ok((y.to_vec(), w))
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns one gradient per node that
    /// participates in the loss and requires it; leaves registered via
    /// `constant` and detached values receive none. The tape itself is left
    /// untouched and can keep recording.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss].needs_grad {
            grads[loss] = Some(vec![1.0]);
        }

        for id in (0..=loss).rev() {
            if grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().unwrap();
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep leaf gradients for the caller
                }
                Op::Detach { .. } => {}
                Op::MatMul { a, b } => self.bwd_matmul(a, b, id, &g, &mut grads),
                Op::Add { a, b } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    for side in [a, b] {
                        if self.nodes[side].needs_grad {
                            let s = self.nodes[side].value.shape().to_vec();
                            acc_add(&mut grads[side], &reduce_to_shape(&g, &out_shape, &s));
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    if self.nodes[a].needs_grad {
                        let sa = self.nodes[a].value.shape().to_vec();
                        acc_add(&mut grads[a], &reduce_to_shape(&g, &out_shape, &sa));
                    }
                    if self.nodes[b].needs_grad {
                        let sb = self.nodes[b].value.shape().to_vec();
                        let mut r = reduce_to_shape(&g, &out_shape, &sb);
                        for v in &mut r {
                            *v = -*v;
                        }
                        acc_add(&mut grads[b], &r);
                    }
                }
                Op::Mul { a, b } => {
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    if self.nodes[a].needs_grad {
                        let sb = self.nodes[b].value.shape().to_vec();
                        let bvals = bcast_gather(self.nodes[b].value.data(), &sb, &out_shape);
                        let prod: Vec<f64> = g.iter().zip(&bvals).map(|(&gv, &bv)| gv * bv).collect();
                        let sa = self.nodes[a].value.shape().to_vec();
                        acc_add(&mut grads[a], &reduce_to_shape(&prod, &out_shape, &sa));
                    }
                    if self.nodes[b].needs_grad {
                        let sa = self.nodes[a].value.shape().to_vec();
                        let avals = bcast_gather(self.nodes[a].value.data(), &sa, &out_shape);
                        let prod: Vec<f64> = g.iter().zip(&avals).map(|(&gv, &av)| gv * av).collect();
                        let sb = self.nodes[b].value.shape().to_vec();
                        acc_add(&mut grads[b], &reduce_to_shape(&prod, &out_shape, &sb));
                    }
                }
                Op::Gelu { x } => {
                    if self.nodes[x].needs_grad {
                        let xv = self.nodes[x].value.data();
                        let dx: Vec<f64> = xv
                            .iter()
                            .zip(&g)
                            .map(|(&t, &gv)| gv * (gauss_cdf(t) + t * gauss_pdf(t)))
                            .collect();
                        acc_add(&mut grads[x], &dx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => self.bwd_layer_norm(x, gain, bias, &g, &mut grads),
                Op::GatherRows { table, ids } => {
                    if self.nodes[table].needs_grad {
                        let width = self.nodes[table].value.shape()[1];
                        let numel = self.nodes[table].value.numel();
                        let buf = grads[table].get_or_insert_with(|| vec![0.0; numel]);
                        for (pos, &r) in ids.iter().enumerate() {
                            for j in 0..width {
                                buf[r * width + j] += g[pos * width + j];
                            }
                        }
                    }
                }
                Op::NarrowLast { x, start, len } => {
                    if self.nodes[x].needs_grad {
                        let d = *self.nodes[x].value.shape().last().unwrap();
                        let numel = self.nodes[x].value.numel();
                        let rows = numel / d;
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; numel]);
                        for r in 0..rows {
                            for j in 0..len {
                                buf[r * d + start + j] += g[r * len + j];
                            }
                        }
                    }
                }
                Op::ConcatLast { xs } => {
                    let total = *self.nodes[id].value.shape().last().unwrap();
                    let rows = self.nodes[id].value.numel() / total;
                    let mut offset = 0;
                    for &xid in &xs {
                        let d = *self.nodes[xid].value.shape().last().unwrap();
                        if self.nodes[xid].needs_grad {
                            let numel = self.nodes[xid].value.numel();
                            let buf = grads[xid].get_or_insert_with(|| vec![0.0; numel]);
                            for r in 0..rows {
                                for j in 0..d {
                                    buf[r * d + j] += g[r * total + offset + j];
                                }
                            }
                        }
                        offset += d;
                    }
                }
                Op::SumAxis { x, axis } => {
                    if self.nodes[x].needs_grad {
                        let sx = self.nodes[x].value.shape().to_vec();
                        let outer: usize = sx[..axis].iter().product();
                        let mid = sx[axis];
                        let inner: usize = sx[axis + 1..].iter().product();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; outer * mid * inner]);
                        for o in 0..outer {
                            for m in 0..mid {
                                for i in 0..inner {
                                    buf[(o * mid + m) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x].needs_grad {
                        let numel = self.nodes[x].value.numel();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; numel]);
                        for v in buf.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::CausalMask { x } => {
                    if self.nodes[x].needs_grad {
                        let l = self.nodes[x].value.shape()[0];
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; l * l]);
                        for i in 0..l {
                            for j in 0..=i {
                                buf[i * l + j] += g[i * l + j];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    if self.nodes[x].needs_grad {
                        acc_add(&mut grads[x], &g);
                    }
                }
                Op::TakeSteps { x, steps } => {
                    if self.nodes[x].needs_grad {
                        let sx = self.nodes[x].value.shape().to_vec();
                        let t = sx[1];
                        let rest: usize = sx[2..].iter().product();
                        let numel = self.nodes[x].value.numel();
                        let buf = grads[x].get_or_insert_with(|| vec![0.0; numel]);
                        for (bi, &s) in steps.iter().enumerate() {
                            for j in 0..rest {
                                buf[(bi * t + s) * rest + j] += g[bi * rest + j];
                            }
                        }
                    }
                }
                Op::PoissonNll { pred, y, w } => {
                    if self.nodes[pred].needs_grad {
                        let pv = self.nodes[pred].value.data();
                        let wsum: f64 = w.iter().sum();
                        let dx: Vec<f64> = (0..pv.len())
                            .map(|i| g[0] * w[i] * (pv[i].exp() - y[i]) / wsum)
                            .collect();
                        acc_add(&mut grads[pred], &dx);
                    }
                }
                Op::BceWithLogits { logits, y, w } => {
                    if self.nodes[logits].needs_grad {
                        let xv = self.nodes[logits].value.data();
                        let wsum: f64 = w.iter().sum();
                        let dx: Vec<f64> = (0..xv.len())
                            .map(|i| g[0] * w[i] * (sigmoid(xv[i]) - y[i]) / wsum)
                            .collect();
                        acc_add(&mut grads[logits], &dx);
                    }
                }
                Op::Huber { pred, y, delta, w } => {
                    if self.nodes[pred].needs_grad {
                        let pv = self.nodes[pred].value.data();
                        let wsum: f64 = w.iter().sum();
                        let dx: Vec<f64> = (0..pv.len())
                            .map(|i| {
                                let e = pv[i] - y[i];
                                g[0] * w[i] * e.clamp(-delta, delta) / wsum
                            })
                            .collect();
                        acc_add(&mut grads[pred], &dx);
                    }
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, slot) in grads.into_iter().enumerate() {
            out.push(slot.map(|mut buf| {
                if self.single {
                    for v in &mut buf {
                        *v = *v as f32 as f64;
                    }
                }
                Tensor { shape: self.nodes[id].value.shape().to_vec(), data: buf }
            }));
        }
        Ok(Gradients { g: out })
    }

    fn bwd_matmul(&self, a: NodeId, b: NodeId, out: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.nodes[a].value.shape().to_vec();
        let sb = self.nodes[b].value.shape().to_vec();
        let so = self.nodes[out].value.shape().to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let lead = so[..so.len() - 2].to_vec();
        let str_a = bcast_strides(&sa[..sa.len() - 2], &lead);
        let str_b = bcast_strides(&sb[..sb.len() - 2], &lead);
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        if self.nodes[a].needs_grad {
            let buf = grads[a].get_or_insert_with(|| vec![0.0; da.len()]);
            for_each_lead(&lead, &str_a, &str_b, |li, oa, ob| {
                // dA += G . B^T
                mm_nt(&mut buf[oa * m * k..], &g[li * m * n..], &db[ob * k * n..], m, n, k);
            });
        }
        if self.nodes[b].needs_grad {
            let buf = grads[b].get_or_insert_with(|| vec![0.0; db.len()]);
            for_each_lead(&lead, &str_a, &str_b, |li, oa, ob| {
                // dB += A^T . G
                mm_tn(&mut buf[ob * k * n..], &da[oa * m * k..], &g[li * m * n..], m, k, n);
            });
        }
    }

    fn bwd_layer_norm(&self, x: NodeId, gain: NodeId, bias: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let d = *self.nodes[x].value.shape().last().unwrap();
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gain].value.data();
        let rows = xv.len() / d;
        let dn = d as f64;
        let need_x = self.nodes[x].needs_grad;
        let need_gain = self.nodes[gain].needs_grad;
        let need_bias = self.nodes[bias].needs_grad;
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dgain = if need_gain { vec![0.0; d] } else { Vec::new() };
        let mut dbias = if need_bias { vec![0.0; d] } else { Vec::new() };
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let gseg = &g[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / dn;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dn;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..d {
                let xhat = (seg[i] - mean) * inv;
                let dxhat = gseg[i] * gv[i];
                s1 += dxhat;
                s2 += dxhat * xhat;
                if need_gain {
                    dgain[i] += gseg[i] * xhat;
                }
                if need_bias {
                    dbias[i] += gseg[i];
                }
            }
            if need_x {
                for i in 0..d {
                    let xhat = (seg[i] - mean) * inv;
                    let dxhat = gseg[i] * gv[i];
                    dx[r * d + i] = inv * (dxhat - s1 / dn - xhat * s2 / dn);
                }
            }
        }
        if need_x {
            acc_add(&mut grads[x], &dx);
        }
        if need_gain {
            acc_add(&mut grads[gain], &dgain);
        }
        if need_bias {
            acc_add(&mut grads[bias], &dbias);
        }
    }

    /// Text dump of the graph, one node per line. Debug aid.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let name = match &n.op {
                Op::Leaf => if n.needs_grad { "var" } else { "const" },
                Op::Detach { .. } => "detach",
                Op::MatMul { .. } => "matmul",
                Op::Add { .. } => "add",
                Op::Sub { .. } => "sub",
                Op::Mul { .. } => "mul",
                Op::Gelu { .. } => "gelu",
                Op::LayerNorm { .. } => "layer_norm",
                Op::GatherRows { .. } => "gather_rows",
                Op::NarrowLast { .. } => "narrow_last",
                Op::ConcatLast { .. } => "concat_last",
                Op::SumAxis { .. } => "sum_axis",
                Op::SumAll { .. } => "sum_all",
                Op::CausalMask { .. } => "causal_mask",
                Op::Reshape { .. } => "reshape",
                Op::TakeSteps { .. } => "take_steps",
                Op::PoissonNll { .. } => "poisson_nll",
                Op::BceWithLogits { .. } => "bce_with_logits",
                Op::Huber { .. } => "huber",
            };
            let ins = match &n.op {
                Op::Leaf => vec![],
                Op::Detach { x } | Op::Gelu { x } | Op::NarrowLast { x, .. } | Op::SumAxis { x, .. }
                | Op::SumAll { x } | Op::CausalMask { x } | Op::Reshape { x } | Op::TakeSteps { x, .. } => vec![*x],
                Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
                Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
                Op::GatherRows { table, .. } => vec![*table],
                Op::ConcatLast { xs } => xs.clone(),
                Op::PoissonNll { pred, .. } | Op::Huber { pred, .. } => vec![*pred],
                Op::BceWithLogits { logits, .. } => vec![*logits],
            };
            let _ = writeln!(s, "%{i} = {name}{ins:?} shape {:?}", n.value.shape());
        }
        s
    }
}

// ── Kernels and math helpers ────────────────────────────────────────────────

/// C[m,n] += A[m,k] . B[k,n]
fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] . B[k,n]^T
fn mm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T . B[m,n]
fn mm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Walk a broadcast lead-shape odometer, handing out (linear index, offset
/// into a's matrices, offset into b's matrices).
fn for_each_lead(lead: &[usize], str_a: &[usize], str_b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = lead.iter().product();
    let mut idx = vec![0usize; lead.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for li in 0..total {
        f(li, oa, ob);
        if li + 1 < total {
            for ax in (0..lead.len()).rev() {
                idx[ax] += 1;
                oa += str_a[ax];
                ob += str_b[ax];
                if idx[ax] < lead[ax] {
                    break;
                }
                oa -= str_a[ax] * lead[ax];
                ob -= str_b[ax] * lead[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// Materialize `src` broadcast to `out_shape`.
pub(crate) fn bcast_gather(src: &[f64], src_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if src_shape == out_shape {
        return src.to_vec();
    }
    let total: usize = out_shape.iter().product();
    let strides = bcast_strides(src_shape, out_shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for i in 0..total {
        out.push(src[off]);
        if i + 1 < total {
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    out
}

fn acc_add(slot: &mut Option<Vec<f64>>, add: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, &a) in buf.iter_mut().zip(add) {
                *b += a;
            }
        }
        None => *slot = Some(add.to_vec()),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the error function.
#[inline]
pub(crate) fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
#[inline]
pub(crate) fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

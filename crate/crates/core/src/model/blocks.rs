//! Forward pass: embedding, gated mixing blocks, and prediction heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor};

use super::{ModelConfig, ModelParams, Task, Variant};

/// Parameters registered on a tape, addressable by name.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model parameter {name} not bound")))
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn from_ids(names: &[String], ids: &[NodeId]) -> Self {
        Bound { ids: names.iter().cloned().zip(ids.iter().copied()).collect() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

/// Put every parameter on the tape. Trainable binding makes them gradient
/// roots; constant binding is for evaluation passes.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Bound {
    let ids = params
        .iter()
        .map(|(name, t)| {
            let id = if trainable { tape.var(t.clone()) } else { tape.constant(t.clone()) };
            (name.clone(), id)
        })
        .collect();
    Bound { ids }
}

pub struct ModelOutput {
    /// Per-visit representation `[b, t, e]`, zero at padded steps.
    pub rep: NodeId,
    /// Log visit rate `[b]`.
    pub count: Option<NodeId>,
    /// Per-category log rates `[b, categories]`.
    pub diag: Option<NodeId>,
    /// Death logit `[b]`.
    pub mortality: Option<NodeId>,
    /// Next-visit stay prediction `[b, t]`.
    pub los: Option<NodeId>,
}

struct Ctx<'a, 'r> {
    tape: &'a mut Tape,
    bound: &'a Bound,
    cfg: &'a ModelConfig,
    dropout_rng: Option<&'r mut ChaCha8Rng>,
}

fn sinusoidal_slots(v_max: usize, e: usize) -> Tensor {
    Tensor::from_fn(&[1, 1, v_max, e], |i| {
        let slot = (i / e) % v_max;
        let d = i % e;
        let exponent = 2.0 * (d / 2) as f64 / e as f64;
        let angle = slot as f64 / 10_000f64.powf(exponent);
        if d % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn mask_tensor(data: &[u8], shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), data.iter().map(|&m| m as f64).collect()).expect("mask shape")
}

impl<'a, 'r> Ctx<'a, 'r> {
    /// Embed code ids, add slot and gap encodings, and zero padded slots:
    /// `[b, t, v, e]` with exact zeros wherever the code mask is off.
    fn embed(&mut self, batch: &SequenceBatch) -> Result<NodeId> {
        let (b, t, v) = (batch.b, batch.t, batch.v);
        let tok_table = self.bound.get("token_embedding")?;
        let ids: Vec<usize> = batch.code_ids.iter().map(|&c| c as usize).collect();
        let mut x = self.tape.gather_rows(tok_table, &ids, &[b, t, v])?;
        if self.cfg.slot_positional_encoding {
            let pe = self.tape.constant(sinusoidal_slots(v, self.cfg.embed_dim));
            x = self.tape.add(x, pe)?;
        }
        if self.cfg.delta_tau_per_slot {
            let dt = self.delta_stream(batch)?;
            let dt = self.tape.reshape(dt, &[b, t, 1, self.cfg.embed_dim])?;
            x = self.tape.add(x, dt)?;
        }
        let mask = self.tape.constant(mask_tensor(&batch.code_mask, &[b, t, v, 1]));
        self.tape.mul(x, mask)
    }

    fn delta_stream(&mut self, batch: &SequenceBatch) -> Result<NodeId> {
        let table = self.bound.get("delta_embedding")?;
        let ids: Vec<usize> = batch.delta_bucket.iter().map(|&d| d as usize).collect();
        self.tape.gather_rows(table, &ids, &[batch.b, batch.t])
    }

    /// Sum slot features into per-visit vectors, excluding padded slots.
    fn visit_sum(&mut self, x4: NodeId, batch: &SequenceBatch) -> Result<NodeId> {
        let mask = self
            .tape
            .constant(mask_tensor(&batch.code_mask, &[batch.b, batch.t, batch.v, 1]));
        let masked = self.tape.mul(x4, mask)?;
        self.tape.sum_axis(masked, 2)
    }

    fn mixer_core(
        &mut self,
        prefix: &str,
        x: NodeId,
        causal: bool,
        slot_mask: Option<NodeId>,
    ) -> Result<NodeId> {
        gated_mixer(self.tape, self.bound, prefix, self.cfg.chunks, x, causal, slot_mask)
    }

    /// Gated channel feedforward with optional dropout after the gate.
    fn feedforward(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let g = self.bound.get(&format!("{prefix}.ln_g"))?;
        let b = self.bound.get(&format!("{prefix}.ln_b"))?;
        let xn = self.tape.layer_norm(x, g, b)?;
        let w1 = self.bound.get(&format!("{prefix}.w1"))?;
        let wg = self.bound.get(&format!("{prefix}.wg"))?;
        let a = self.tape.matmul(xn, w1)?;
        let gate_in = self.tape.matmul(xn, wg)?;
        let gate = self.tape.gelu(gate_in);
        let mut h = self.tape.mul(a, gate)?;
        let p = self.cfg.dropout;
        if p > 0.0 {
            if let Some(rng) = self.dropout_rng.as_deref_mut() {
                let shape = self.tape.value(h).shape().to_vec();
                let keep = 1.0 / (1.0 - p);
                let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
                let mask = self.tape.constant(mask);
                h = self.tape.mul(h, mask)?;
            }
        }
        let w2 = self.bound.get(&format!("{prefix}.w2"))?;
        self.tape.matmul(h, w2)
    }

    fn axial_layer(&mut self, i: usize, x4: NodeId, batch: &SequenceBatch) -> Result<NodeId> {
        let (b, t, v) = (batch.b, batch.t, batch.v);
        let e = self.cfg.embed_dim;
        // within-visit mixing, visits folded into the lead axis
        let folded = self.tape.reshape(x4, &[b * t, v, e])?;
        let slot_mask = self.tape.constant(mask_tensor(&batch.code_mask, &[b * t, v, 1]));
        let dv = self.mixer_core(&format!("layer{i}.visit"), folded, false, Some(slot_mask))?;
        let dv4 = self.tape.reshape(dv, &[b, t, v, e])?;
        // across-visit mixing on the masked slot sum
        let mut s = self.visit_sum(x4, batch)?;
        if !self.cfg.delta_tau_per_slot {
            let dt = self.delta_stream(batch)?;
            s = self.tape.add(s, dt)?;
        }
        let ds = self.mixer_core(&format!("layer{i}.time"), s, true, None)?;
        let ds4 = self.tape.reshape(ds, &[b, t, 1, e])?;
        let x4 = self.tape.add(x4, dv4)?;
        let x4 = self.tape.add(x4, ds4)?;
        let ff = self.feedforward(&format!("layer{i}.ff"), x4)?;
        self.tape.add(x4, ff)
    }

    fn additive_layer(&mut self, i: usize, s: NodeId) -> Result<NodeId> {
        let ds = self.mixer_core(&format!("layer{i}.time"), s, true, None)?;
        let s = self.tape.add(s, ds)?;
        let ff = self.feedforward(&format!("layer{i}.ff"), s)?;
        self.tape.add(s, ff)
    }
}

/// Gated mixing along the second-to-last axis of `x` `[n.., l, e]`, reading
/// parameters under `prefix`. One half of the widened projection modulates
/// the other after a learned cross-position map; that map starts at zero with
/// unit bias, so a freshly initialized mixer touches no other position and
/// gates every position by the same constant.
///
/// `slot_mask` (same leading shape, trailing 1) keeps padded rows out of the
/// mix; `causal` restricts mixing to current-and-earlier rows.
pub fn gated_mixer(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    chunks: usize,
    x: NodeId,
    causal: bool,
    slot_mask: Option<NodeId>,
) -> Result<NodeId> {
    let g = bound.get(&format!("{prefix}.ln_g"))?;
    let bln = bound.get(&format!("{prefix}.ln_b"))?;
    let xn = tape.layer_norm(x, g, bln)?;
    let u = bound.get(&format!("{prefix}.sgu.u"))?;
    let z = tape.matmul(xn, u)?;
    let mut z = tape.gelu(z);
    if let Some(m) = slot_mask {
        z = tape.mul(z, m)?;
    }
    let (z1, z2) = tape.split_last(z)?;
    let hg = bound.get(&format!("{prefix}.sgu.ln_g"))?;
    let hb = bound.get(&format!("{prefix}.sgu.ln_b"))?;
    let mut h = tape.layer_norm(z2, hg, hb)?;
    if let Some(m) = slot_mask {
        h = tape.mul(h, m)?;
    }
    let proj_dim = tape.value(z1).shape().last().copied().unwrap_or(0);
    if chunks == 0 || proj_dim % chunks != 0 {
        return Err(Error::Config(format!("{chunks} chunks do not divide width {proj_dim}")));
    }
    let chunk_width = proj_dim / chunks;
    let mut gated = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let hc = tape.narrow_last(h, c * chunk_width, chunk_width)?;
        let z1c = tape.narrow_last(z1, c * chunk_width, chunk_width)?;
        let mut w = bound.get(&format!("{prefix}.sgu.w{c}"))?;
        if causal {
            w = tape.causal_mask(w)?;
        }
        let bc = bound.get(&format!("{prefix}.sgu.b{c}"))?;
        let mixed = tape.matmul(w, hc)?;
        let mixed = tape.add(mixed, bc)?;
        let gate = tape.gelu(mixed);
        gated.push(tape.mul(z1c, gate)?);
    }
    let cat = tape.concat_last(&gated)?;
    let v = bound.get(&format!("{prefix}.sgu.v"))?;
    tape.matmul(cat, v)
}

fn check_batch(cfg: &ModelConfig, batch: &SequenceBatch) -> Result<()> {
    if batch.t != cfg.t_max || batch.v != cfg.v_max {
        return Err(Error::Dim(format!(
            "batch is [{}, {}, {}] but the model mixes over t={}, v={}",
            batch.b, batch.t, batch.v, cfg.t_max, cfg.v_max
        )));
    }
    if batch.b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&id) = batch.code_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Index(format!("code id {id} outside vocab of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Run the trunk and return the per-visit representation `[b, t, e]`.
/// Padded steps come out exactly zero. Pass a dropout rng only when training.
pub fn forward_repr(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    check_batch(cfg, batch)?;
    let mut ctx = Ctx { tape, bound, cfg, dropout_rng };
    let x4 = ctx.embed(batch)?;
    let rep = match cfg.variant {
        Variant::Axial => {
            let mut x4 = x4;
            for i in 0..cfg.layers {
                x4 = ctx.axial_layer(i, x4, batch)?;
            }
            ctx.visit_sum(x4, batch)?
        }
        Variant::Additive => {
            let mut s = ctx.visit_sum(x4, batch)?;
            if !cfg.delta_tau_per_slot {
                let dt = ctx.delta_stream(batch)?;
                s = ctx.tape.add(s, dt)?;
            }
            for i in 0..cfg.layers {
                s = ctx.additive_layer(i, s)?;
            }
            s
        }
    };
    // normalize before the heads: the residual stream grows with depth and
    // the slot sum grows with occupancy, and the count heads exponentiate
    let g = ctx.bound.get("final.ln_g")?;
    let b = ctx.bound.get("final.ln_b")?;
    let rep = ctx.tape.layer_norm(rep, g, b)?;
    let vm = ctx.tape.constant(mask_tensor(&batch.visit_mask, &[batch.b, batch.t, 1]));
    let rep = ctx.tape.mul(rep, vm)?;
    if !ctx.tape.value(rep).is_finite() {
        return Err(Error::Numerical("non-finite activations in forward pass".into()));
    }
    Ok(rep)
}

/// Last valid step per row; every batched record holds at least one visit.
pub(crate) fn last_steps(batch: &SequenceBatch) -> Result<Vec<usize>> {
    (0..batch.b)
        .map(|b| {
            let n: usize = batch.visit_mask[b * batch.t..(b + 1) * batch.t]
                .iter()
                .map(|&m| m as usize)
                .sum();
            if n == 0 {
                Err(Error::Data(format!("batch row {b} has no visits")))
            } else {
                Ok(n - 1)
            }
        })
        .collect()
}

/// Trunk plus every configured head.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ModelOutput> {
    let rep = forward_repr(tape, bound, cfg, batch, dropout_rng)?;
    let steps = last_steps(batch)?;
    let rep_last = tape.take_steps(rep, &steps)?;
    let mut out =
        ModelOutput { rep, count: None, diag: None, mortality: None, los: None };
    for task in &cfg.tasks {
        let w = bound.get(&format!("head.{task}.w"))?;
        let b = bound.get(&format!("head.{task}.b"))?;
        match task {
            Task::Count | Task::Mortality => {
                let y = tape.matmul(rep_last, w)?;
                let y = tape.add(y, b)?;
                let y = tape.reshape(y, &[batch.b])?;
                if *task == Task::Count {
                    out.count = Some(y);
                } else {
                    out.mortality = Some(y);
                }
            }
            Task::Diag => {
                let y = tape.matmul(rep_last, w)?;
                out.diag = Some(tape.add(y, b)?);
            }
            Task::Los => {
                let y = tape.matmul(rep, w)?;
                let y = tape.add(y, b)?;
                out.los = Some(tape.reshape(y, &[batch.b, batch.t])?);
            }
        }
    }
    Ok(out)
}

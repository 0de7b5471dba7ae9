//! Attention-free sequence model over visit histories.
//!
//! Two mixing variants share one parameter layout: `Additive` sums each
//! visit's code embeddings and mixes along time only; `Axial` alternates
//! mixing within visits (across code slots) and across visits, touching
//! quadratic cost only per axis instead of over the flattened history.
//! Temporal mixing matrices are causally masked, so step `t` never reads
//! later visits.

mod blocks;
mod checkpoint;
mod losses;

pub use blocks::{bind_params, forward, forward_repr, gated_mixer, Bound, ModelOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use losses::{multitask_loss, LossWeights};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::DELTA_TAU_BUCKETS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Additive,
    Axial,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Variant::Additive),
            "axial" => Ok(Variant::Axial),
            other => Err(Error::Config(format!("unknown variant '{other}' (additive, axial)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Additive => "additive",
            Variant::Axial => "axial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Count,
    Diag,
    Mortality,
    Los,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Task::Count),
            "diag" => Ok(Task::Diag),
            "mortality" => Ok(Task::Mortality),
            "los" => Ok(Task::Los),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (count, diag, mortality, los)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Count => "count",
            Task::Diag => "diag",
            Task::Mortality => "mortality",
            Task::Los => "los",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Gating expansion width; the input projection doubles it for the split.
    pub proj_dim: usize,
    pub ff_dim: usize,
    pub t_max: usize,
    pub v_max: usize,
    pub layers: usize,
    /// Independent gating groups along `proj_dim`, each with its own mixing
    /// matrix.
    pub chunks: usize,
    pub variant: Variant,
    /// Add the inter-visit gap embedding to every code slot; otherwise it
    /// joins the per-visit stream after slot summation.
    pub delta_tau_per_slot: bool,
    /// Sinusoidal encoding of the code slot index, marking recording priority.
    pub slot_positional_encoding: bool,
    pub dropout: f64,
    pub tasks: Vec<Task>,
}

impl ModelConfig {
    /// Desk-scale defaults; widths follow the embedding dimension.
    pub fn new(vocab_size: usize, embed_dim: usize, t_max: usize, v_max: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            proj_dim: 2 * embed_dim,
            ff_dim: 4 * embed_dim,
            t_max,
            v_max,
            layers: 2,
            chunks: 4,
            variant: Variant::Axial,
            delta_tau_per_slot: true,
            slot_positional_encoding: true,
            dropout: 0.1,
            tasks: vec![Task::Count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab must hold at least pad and unk".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("ff_dim", self.ff_dim),
            ("t_max", self.t_max),
            ("v_max", self.v_max),
            ("layers", self.layers),
            ("chunks", self.chunks),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.proj_dim % self.chunks != 0 {
            return Err(Error::Config(format!(
                "chunks {} must divide proj_dim {}",
                self.chunks, self.proj_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no prediction heads configured".into()));
        }
        let mut seen = self.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(Error::Config("duplicate task in head list".into()));
        }
        Ok(())
    }
}

/// Named parameter store. Iteration order is the name order, which fixes both
/// initialization draws and checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl ModelParams {
    /// Draw fresh parameters. Mixing matrices start at zero with unit bias, so
    /// every gate opens on a constant and sequence mixing is learned from
    /// nothing; embeddings and projections start small and random.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        let e = cfg.embed_dim;
        let p = cfg.proj_dim;
        let e_std = 1.0 / (e as f64).sqrt();
        let p_std = 1.0 / (p as f64).sqrt();
        let f_std = 1.0 / (cfg.ff_dim as f64).sqrt();

        let mut draw = |map: &mut BTreeMap<String, Tensor>, name: String, shape: &[usize], init: Init| {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(shape, |_| n.sample(&mut rng))
                }
            };
            map.insert(name, t);
        };

        draw(&mut map, "token_embedding".into(), &[cfg.vocab_size, e], Init::Normal(0.02));
        draw(&mut map, "delta_embedding".into(), &[DELTA_TAU_BUCKETS, e], Init::Normal(0.02));

        for i in 0..cfg.layers {
            let mut mixer = |map: &mut BTreeMap<String, Tensor>, axis: &str, l: usize| {
                let pre = format!("layer{i}.{axis}");
                draw(map, format!("{pre}.ln_g"), &[e], Init::Ones);
                draw(map, format!("{pre}.ln_b"), &[e], Init::Zeros);
                draw(map, format!("{pre}.sgu.u"), &[e, 2 * p], Init::Normal(e_std));
                draw(map, format!("{pre}.sgu.ln_g"), &[p], Init::Ones);
                draw(map, format!("{pre}.sgu.ln_b"), &[p], Init::Zeros);
                for c in 0..cfg.chunks {
                    draw(map, format!("{pre}.sgu.w{c}"), &[l, l], Init::Zeros);
                    draw(map, format!("{pre}.sgu.b{c}"), &[l, 1], Init::Ones);
                }
                draw(map, format!("{pre}.sgu.v"), &[p, e], Init::Normal(p_std));
            };
            if cfg.variant == Variant::Axial {
                mixer(&mut map, "visit", cfg.v_max);
            }
            mixer(&mut map, "time", cfg.t_max);
            let pre = format!("layer{i}.ff");
            draw(&mut map, format!("{pre}.ln_g"), &[e], Init::Ones);
            draw(&mut map, format!("{pre}.ln_b"), &[e], Init::Zeros);
            draw(&mut map, format!("{pre}.w1"), &[e, cfg.ff_dim], Init::Normal(e_std));
            draw(&mut map, format!("{pre}.wg"), &[e, cfg.ff_dim], Init::Normal(e_std));
            draw(&mut map, format!("{pre}.w2"), &[cfg.ff_dim, e], Init::Normal(f_std));
        }

        // heads read a normalized representation; without this the residual
        // stream's growing scale feeds straight into exp() in the count heads
        draw(&mut map, "final.ln_g".into(), &[e], Init::Ones);
        draw(&mut map, "final.ln_b".into(), &[e], Init::Zeros);

        for task in &cfg.tasks {
            let k = match task {
                Task::Diag => crate::data::NUM_DIAG_CATEGORIES,
                _ => 1,
            };
            draw(&mut map, format!("head.{task}.w"), &[e, k], Init::Normal(e_std));
            draw(&mut map, format!("head.{task}.b"), &[k], Init::Zeros);
        }

        let mut params = ModelParams { map };
        params.pin_structural();
        Ok(params)
    }

    /// Re-impose exact structural zeros: the padding embedding row and the
    /// future-facing half of every temporal mixing matrix. Run after every
    /// optimizer step so the zeros survive weight decay and moment noise.
    pub fn pin_structural(&mut self) {
        if let Some(emb) = self.map.get_mut("token_embedding") {
            let e = emb.shape()[1];
            emb.data_mut()[..e].fill(0.0);
        }
        for (name, t) in self.map.iter_mut() {
            if name.contains(".time.sgu.w") && t.rank() == 2 {
                let l = t.shape()[0];
                let data = t.data_mut();
                for r in 0..l {
                    data[r * l + r + 1..(r + 1) * l].fill(0.0);
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParams { map }
    }
}

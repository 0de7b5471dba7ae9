//! Flat `key = value` run settings.
//!
//! One namespace, no sections. Every key is taken exactly once while the
//! settings are assembled; anything left over at the end is a typo and fails
//! the parse rather than being silently ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::tensor::Precision;
use crate::train::TrainRunConfig;

#[derive(Debug)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    taken: BTreeSet<String>,
}

pub fn parse_config(text: &str) -> Result<ConfigMap> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = i + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {n}: empty key")));
        }
        if entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {n}: duplicate key `{key}`")));
        }
    }
    Ok(ConfigMap { entries, taken: BTreeSet::new() })
}

pub fn load_config(path: &Path) -> Result<ConfigMap> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl ConfigMap {
    /// Raw string lookup; marks the key as consumed.
    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.taken.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("key `{key}`: cannot parse `{v}` ({e})"))
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn unused(&self) -> Vec<String> {
        self.entries.keys().filter(|k| !self.taken.contains(*k)).cloned().collect()
    }

    /// Call once every expected key has been taken.
    pub fn finish(&self) -> Result<()> {
        let unused = self.unused();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unused.join(", "))))
        }
    }
}

/// Everything a run needs beyond the cohort itself. `model.vocab_size`
/// stays 0 until a vocabulary has been built from data.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainRunConfig,
    pub data: DataSettings,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    /// History window for the next-period count task, and the target window
    /// mirrored after the anchor.
    pub history_days: i64,
    /// Pretraining slide: window length and step.
    pub window_days: i64,
    pub stride_days: i64,
    pub val_fraction: f64,
    /// Codes seen fewer times than this map to the unknown token.
    pub min_count: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            history_days: 365,
            window_days: 365,
            stride_days: 365,
            val_fraction: 0.2,
            min_count: 1,
        }
    }
}

impl Settings {
    pub fn from_map(mut map: ConfigMap) -> Result<Settings> {
        let embed_dim = map.take_or("embed_dim", 16)?;
        let t_max = map.take_or("t_max", 16)?;
        let v_max = map.take_or("v_max", 8)?;
        let mut model = ModelConfig::new(0, embed_dim, t_max, v_max);
        model.proj_dim = map.take_or("proj_dim", model.proj_dim)?;
        model.ff_dim = map.take_or("ff_dim", model.ff_dim)?;
        model.layers = map.take_or("layers", model.layers)?;
        model.chunks = map.take_or("chunks", model.chunks)?;
        model.variant = map.take_or("variant", model.variant)?;
        model.dropout = map.take_or("dropout", model.dropout)?;
        model.delta_tau_per_slot = map.take_or("delta_tau_per_slot", model.delta_tau_per_slot)?;
        model.slot_positional_encoding =
            map.take_or("slot_positional_encoding", model.slot_positional_encoding)?;
        if let Some(list) = map.take_raw("tasks") {
            model.tasks = list
                .split(',')
                .map(|s| s.trim().parse::<Task>())
                .collect::<Result<Vec<_>>>()?;
        }

        let mut train = TrainRunConfig::default();
        train.epochs = map.take_or("epochs", train.epochs)?;
        train.batch_size = map.take_or("batch_size", train.batch_size)?;
        train.peak_lr = map.take_or("peak_lr", train.peak_lr)?;
        train.warmup_fraction = map.take_or("warmup_fraction", train.warmup_fraction)?;
        train.weight_decay = map.take_or("weight_decay", train.weight_decay)?;
        train.patience = map.take_or("patience", train.patience)?;
        train.precision = match map.take_raw("precision").as_deref() {
            None => train.precision,
            Some("single") => Precision::Single,
            Some("double") => Precision::Double,
            Some(other) => {
                return Err(Error::Config(format!(
                    "key `precision`: `{other}` is not single or double"
                )))
            }
        };

        let mut data = DataSettings::default();
        data.history_days = map.take_or("history_days", data.history_days)?;
        data.window_days = map.take_or("window_days", data.window_days)?;
        data.stride_days = map.take_or("stride_days", data.stride_days)?;
        data.val_fraction = map.take_or("val_fraction", data.val_fraction)?;
        data.min_count = map.take_or("min_count", data.min_count)?;

        let mut synth = SynthConfig::default();
        synth.n_background = map.take_or("n_background", synth.n_background)?;
        synth.n_subgroup = map.take_or("n_subgroup", synth.n_subgroup)?;
        synth.horizon_years = map.take_or("horizon_years", synth.horizon_years)?;
        synth.start_year = map.take_or("start_year", synth.start_year)?;
        synth.subgroup_shift = map.take_or("subgroup_shift", synth.subgroup_shift)?;
        if let Some(label) = map.take_raw("subgroup_label") {
            synth.subgroup_label = label;
        }
        if let Some(code) = map.take_raw("marker_code") {
            synth.marker_code = code;
        }

        map.finish()?;
        Ok(Settings { model, train, data, synth })
    }

    pub fn defaults() -> Settings {
        Settings::from_map(parse_config("").expect("empty config parses"))
            .expect("defaults assemble")
    }
}

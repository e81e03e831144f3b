//! The resolved run configuration and its layered sources.
//!
//! Every setting has a flat key. Values are applied in order defaults, JSON
//! file, `HYBRID_<KEY>` environment variables, command-line flags, so later
//! layers win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hybrid_core::data::{CsvSchema, Ratios, Resampler, Task, Technique};
use hybrid_core::error::{Error, Result};
use hybrid_core::explain::LimeConfig;
use hybrid_core::model::ModelConfig;
use hybrid_core::text::TextConfig;
use hybrid_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "HYBRID_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub columns: CsvSchema,
    /// Directory holding the vocabulary, corpus cache and manifest.
    pub prepared: Option<PathBuf>,
    pub task: Task,
    pub technique: Option<Technique>,
    pub resampler: Resampler,
    pub ratios: Ratios,
    pub text: TextConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k: usize,
    pub val_fraction: f64,
    pub lime: LimeConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            columns: CsvSchema::default(),
            prepared: None,
            task: Task::Aspect,
            technique: None,
            resampler: Resampler::None,
            ratios: Ratios::default(),
            text: TextConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k: 5,
            val_fraction: 0.125,
            lime: LimeConfig::default(),
            seed: 42,
            out: PathBuf::from("runs"),
            jobs: 1,
        }
    }
}

/// Every key accepted by the file, environment and `--set`.
pub const KEYS: &[&str] = &[
    "data",
    "text_column",
    "aspect_column",
    "polarity_column",
    "id_column",
    "prepared",
    "task",
    "technique",
    "resample",
    "ratios",
    "seed",
    "out",
    "jobs",
    "vocab_size",
    "max_len",
    "d_bert",
    "layers",
    "heads",
    "d_ff",
    "dropout",
    "kernel_sizes",
    "filters",
    "proj_dim",
    "l2",
    "hidden",
    "attn_dim",
    "dense_units",
    "label_smoothing",
    "epochs",
    "batch_size",
    "patience",
    "target_train_accuracy",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "clip_norm",
    "k",
    "val_fraction",
    "lime_samples",
    "kernel_width",
    "ridge",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// `none` (any case) or empty means unset.
fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    let t = v.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("null") {
        Ok(None)
    } else {
        parse(key, t).map(Some)
    }
}

impl RunConfig {
    /// Applies one flat key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data" => self.data = parse_opt(key, v)?,
            "text_column" => self.columns.text = v.to_string(),
            "aspect_column" => self.columns.aspect = v.to_string(),
            "polarity_column" => self.columns.polarity = v.to_string(),
            "id_column" => self.columns.id = parse_opt(key, v)?,
            "prepared" => self.prepared = parse_opt(key, v)?,
            "task" => self.task = v.parse()?,
            "technique" => self.technique = if v.trim().eq_ignore_ascii_case("none") { None } else { Some(v.parse()?) },
            "resample" => self.resampler = v.parse()?,
            "ratios" => self.ratios = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            "vocab_size" => self.text.vocab_size = parse(key, v)?,
            "max_len" => self.text.max_len = parse(key, v)?,
            "d_bert" => m.d_bert = parse(key, v)?,
            "layers" => m.layers = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "kernel_sizes" => {
                m.kernel_sizes = v
                    .split([',', ' '])
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "filters" => m.filters = parse(key, v)?,
            "proj_dim" => m.proj_dim = parse(key, v)?,
            "l2" => m.l2 = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "attn_dim" => m.attn_dim = parse(key, v)?,
            "dense_units" => m.dense_units = parse(key, v)?,
            "label_smoothing" => m.label_smoothing = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "patience" => t.patience = parse_opt(key, v)?,
            "target_train_accuracy" => t.target_train_accuracy = parse_opt(key, v)?,
            "lr" => t.optimizer.lr = parse(key, v)?,
            "beta1" => t.optimizer.beta1 = parse(key, v)?,
            "beta2" => t.optimizer.beta2 = parse(key, v)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "clip_norm" => t.optimizer.clip_norm = parse_opt(key, v)?,
            "k" => self.k = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "lime_samples" => self.lime.num_samples = parse(key, v)?,
            "kernel_width" => self.lime.kernel_width = parse_opt(key, v)?,
            "ridge" => self.lime.ridge = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.technique.is_none() && self.resampler != Resampler::None {
            return Err(Error::Config("resample needs technique 1 or 2".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.text.max_len < 2 {
            return Err(Error::Config("max_len must leave room for [CLS] and [SEP]".into()));
        }
        self.ratios.validate()?;
        self.train.validate()
    }

    /// The prepared-corpus directory, defaulting to `<out>/prepared`.
    pub fn prepared_dir(&self) -> PathBuf {
        self.prepared.clone().unwrap_or_else(|| self.out.join("prepared"))
    }
}

/// A flat JSON object as (key, value) pairs. Strings pass through; numbers
/// and booleans are rendered; arrays become comma lists; null means unset.
pub fn file_layer(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let obj: BTreeMap<String, Value> = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("{}: expected a flat JSON object ({e})", origin.display())))?;
    obj.into_iter()
        .map(|(k, v)| {
            let s = match v {
                Value::String(s) => s,
                Value::Null => "none".into(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                Value::Array(items) => items.iter().map(|i| i.to_string().trim_matches('"').to_string()).collect::<Vec<_>>().join(","),
                Value::Object(_) => return Err(Error::Config(format!("{}: {k} must not be nested", origin.display()))),
            };
            Ok((k, s))
        })
        .collect()
}

/// `HYBRID_<KEY>` variables for every known key, in key order.
pub fn env_layer(lookup: impl Fn(&str) -> Option<String>) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| lookup(&format!("{ENV_PREFIX}{}", k.to_ascii_uppercase())).map(|v| (k.to_string(), v)))
        .collect()
}

/// Defaults, then each layer in turn, then validation.
pub fn resolve(layers: &[Vec<(String, String)>]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for layer in layers {
        for (k, v) in layer {
            cfg.set(k, v)?;
        }
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

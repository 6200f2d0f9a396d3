//! Run configuration: built-in presets, user overrides, and resolution.
//!
//! A user config is a partial JSON document deep-merged over the selected
//! preset. Objects merge key by key; any other value replaces the preset
//! value wholesale. Unknown keys are rejected when the merged document is
//! deserialized.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::contrastive::{PretrainConfig, ProjectionHeadSpec};
use crate::error::{Error, Result};
use crate::mc::{AggregationProtocol, McConfig};
use crate::optim::AdamConfig;
use crate::segment::{FinetuneConfig, DEFAULT_SMOOTHING};
use crate::volume::{CropConfig, Dims, PhantomSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 16³ phantoms, epochs sized for a single CPU core.
    Desk,
    /// The published resolution, epochs and dataset splits.
    Paper,
}

/// Scan counts of one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    /// Scans available for pretraining, labelled or not.
    pub total: usize,
    pub annotated: usize,
    pub train: usize,
    pub test: usize,
    pub num_classes: usize,
}

impl SplitCounts {
    pub fn validate(&self) -> Result<()> {
        if self.annotated > self.total || self.train + self.test > self.annotated || self.train == 0 || self.test == 0 {
            return Err(Error::Config(format!("inconsistent split counts {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Key into `splits` naming the dataset in use.
    pub dataset: String,
    pub splits: BTreeMap<String, SplitCounts>,
    /// Network input resolution after cropping and resizing.
    pub resolution: Dims,
    pub crop: CropConfig,
    /// Generator settings used by `synth`; `seed` is the dataset seed and
    /// scan `i` uses `seed + i`.
    pub phantom: PhantomSpec,
    /// Seed of the train/test split among annotated scans.
    pub split_seed: u64,
}

impl DataConfig {
    pub fn split(&self) -> Result<&SplitCounts> {
        self.splits
            .get(&self.dataset)
            .ok_or_else(|| Error::Config(format!("data.dataset {:?} has no entry in data.splits", self.dataset)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub fraction: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub enc_dropout: f64,
    pub dec_dropout: f64,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    /// `"random"` or `"pretrained:<path>"`; relative paths resolve against
    /// the run directory.
    pub init: String,
    pub batch_size: usize,
    pub smoothing: f64,
    pub prior_bias: bool,
    pub optimizer: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitSource {
    Random,
    Pretrained(String),
}

impl FinetuneSection {
    pub fn train_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            enc_dropout: self.enc_dropout,
            dec_dropout: self.dec_dropout,
            smoothing: self.smoothing,
            class_weights: self.class_weights.clone(),
            prior_bias: self.prior_bias,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }

    pub fn init_source(&self) -> Result<InitSource> {
        match self.init.as_str() {
            "random" => Ok(InitSource::Random),
            s => match s.strip_prefix("pretrained:") {
                Some(p) if !p.is_empty() => Ok(InitSource::Pretrained(p.to_string())),
                _ => Err(Error::Config(format!("finetune.init {s:?} is neither \"random\" nor \"pretrained:<path>\""))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub samples: usize,
    pub enc_rate: f64,
    pub dec_rate: f64,
    pub seed: u64,
    pub protocol: AggregationProtocol,
    /// Class whose probability percentiles are mapped.
    pub heatmap_class: usize,
    pub percentiles: Vec<f64>,
    /// Axial slice rendered to PPM; the middle slice when unset.
    pub render_slice: Option<usize>,
}

impl McSection {
    pub fn mc_config(&self) -> McConfig {
        McConfig { samples: self.samples, enc_rate: self.enc_rate, dec_rate: self.dec_rate, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dropout_rates: Vec<f64>,
    pub majority_weights: Vec<f64>,
    pub union_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSection,
    pub mc: McSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => desk(),
            Preset::Paper => paper(),
        }
    }

    /// Preset values overridden by `overrides`, then validated.
    pub fn resolve(preset: Preset, overrides: Option<Value>) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::preset(preset)).expect("presets serialize");
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(Error::Config("config root must be a JSON object".into()));
            }
            merge(&mut doc, o);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads overrides from `path` (if any). A `"preset"` key in the file
    /// selects the base preset unless `cli_preset` is given.
    pub fn load(path: Option<&Path>, cli_preset: Option<Preset>) -> Result<Self> {
        let overrides = match path {
            None => None,
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
            }
        };
        let file_preset = match overrides.as_ref().and_then(|o| o.get("preset")) {
            Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?),
            None => None,
        };
        let preset = cli_preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut overrides = overrides;
        if let Some(Value::Object(m)) = overrides.as_mut() {
            m.insert("preset".into(), serde_json::to_value(preset).expect("preset serializes"));
        }
        Self::resolve(preset, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let split = self.data.split()?;
        split.validate()?;
        if self.data.resolution.contains(&0) {
            return Err(Error::Config("data.resolution must be positive".into()));
        }
        if split.num_classes != self.data.phantom.num_classes as usize {
            return Err(Error::Config(format!(
                "data.phantom.num_classes {} differs from split num_classes {}",
                self.data.phantom.num_classes, split.num_classes
            )));
        }
        self.augment.validate().map_err(config_err)?;
        self.pretrain.validate().map_err(config_err)?;
        self.pretrain.encoder_spec(self.data.resolution).map_err(config_err)?;
        let f = &self.finetune;
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(Error::Config(format!("finetune.fraction {} outside (0, 1]", f.fraction)));
        }
        f.train_config().validate()?;
        f.init_source()?;
        self.mc.mc_config().validate()?;
        if self.mc.heatmap_class >= split.num_classes {
            return Err(Error::Config(format!("mc.heatmap_class {} not below {} classes", self.mc.heatmap_class, split.num_classes)));
        }
        if self.mc.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::Config("mc.percentiles must lie in [0, 100]".into()));
        }
        let e = &self.eval;
        if e.fractions.iter().any(|&x| !(x > 0.0 && x <= 1.0)) || e.seeds.is_empty() {
            return Err(Error::Config("eval.fractions must lie in (0, 1] and eval.seeds be non-empty".into()));
        }
        if e.dropout_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("eval.dropout_rates must lie in [0, 1)".into()));
        }
        if e.majority_weights.len() != split.num_classes || e.majority_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("eval.majority_weights needs one non-negative weight per class".into()));
        }
        if e.union_class >= split.num_classes {
            return Err(Error::Config(format!("eval.union_class {} not below {} classes", e.union_class, split.num_classes)));
        }
        Ok(())
    }
}

/// Any validation failure of a config section is a configuration error.
fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Deep-merges `over` into `base`.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && !is_tagged(slot) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Internally tagged enums (an object with a string `"protocol"` key) are replaced
/// wholesale so switching variants does not inherit stale fields.
fn is_tagged(v: &Value) -> bool {
    v.get("protocol").is_some_and(Value::is_string)
}

fn splits(entries: &[(&str, [usize; 5])]) -> BTreeMap<String, SplitCounts> {
    entries
        .iter()
        .map(|&(name, [total, annotated, train, test, num_classes])| {
            (name.to_string(), SplitCounts { total, annotated, train, test, num_classes })
        })
        .collect()
}

fn desk() -> RunConfig {
    RunConfig {
        preset: Preset::Desk,
        data: DataConfig {
            dataset: "phantom".into(),
            splits: splits(&[("phantom", [100, 85, 60, 25, 3])]),
            resolution: [16; 3],
            crop: CropConfig { use_labels: false, ..CropConfig::default() },
            phantom: PhantomSpec { dims: [20; 3], ..PhantomSpec::default() },
            split_seed: 7,
        },
        augment: AugmentConfig::default(),
        pretrain: PretrainConfig {
            temperature: 0.05,
            epochs: 50,
            scans_per_batch: 4,
            grid: [2, 2, 2],
            encoder: vec![8, 16, 32],
            head: ProjectionHeadSpec { hidden_dim: 128, output_dim: 64 },
            seed: 11,
            optimizer: AdamConfig::default(),
        },
        finetune: FinetuneSection {
            fraction: 1.0,
            epochs: 60,
            warmup_epochs: 5,
            enc_dropout: 0.3,
            dec_dropout: 0.0,
            class_weights: None,
            seed: 0,
            init: "pretrained:pretrain/encoder.ckpt".into(),
            batch_size: 1,
            smoothing: DEFAULT_SMOOTHING,
            prior_bias: true,
            optimizer: AdamConfig::default(),
        },
        mc: McSection {
            samples: 25,
            enc_rate: 0.3,
            dec_rate: 0.0,
            seed: 23,
            protocol: AggregationProtocol::Majority,
            heatmap_class: 2,
            percentiles: vec![5.0, 50.0, 95.0],
            render_slice: None,
        },
        eval: EvalSection {
            fractions: vec![0.05, 0.10, 0.25, 0.50, 1.00],
            seeds: vec![0],
            dropout_rates: vec![0.1, 0.3, 0.5],
            majority_weights: vec![1.0, 2.0, 2.0],
            union_class: 2,
        },
    }
}

fn paper() -> RunConfig {
    let base = desk();
    RunConfig {
        preset: Preset::Paper,
        data: DataConfig {
            dataset: "pancreas".into(),
            splits: splits(&[("pancreas", [420, 281, 197, 84, 3]), ("brats", [351, 285, 200, 85, 4])]),
            resolution: [128; 3],
            crop: base.data.crop.clone(),
            phantom: PhantomSpec { dims: [160; 3], ..PhantomSpec::default() },
            split_seed: base.data.split_seed,
        },
        pretrain: PretrainConfig {
            epochs: 1000,
            encoder: vec![16, 32, 64, 128],
            ..base.pretrain
        },
        finetune: FinetuneSection { epochs: 400, warmup_epochs: 25, ..base.finetune },
        mc: McSection { samples: 100, ..base.mc },
        ..base
    }
}

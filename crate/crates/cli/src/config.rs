//! Experiment configuration: a TOML file with every key optional, overridden
//! by command-line flags, then resolved so that one seed drives everything.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use dagcnn::data::{Dataset, SynthTaskConfig};
use dagcnn::multiscale::{toy_backbone, BackboneLayer, BackboneSpec, InitScheme, TapSet, DEFAULT_HEAD_STD};
use dagcnn::select::LinearHeadConfig;
use dagcnn::train::{TrainConfig, TrainMode};

use crate::UsageError;

/// Which backbone ReLUs get a branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapChoice {
    All,
    Last,
    /// Greedy forward selection on validation accuracy.
    Auto,
    List(Vec<usize>),
}

impl FromStr for TapChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" => Ok(TapChoice::All),
            "last" => Ok(TapChoice::Last),
            "auto" => Ok(TapChoice::Auto),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad tap `{t}` (expected all, last, auto or a,b,c)")))
                .collect::<Result<Vec<_>, _>>()
                .map(TapChoice::List),
        }
    }
}

impl fmt::Display for TapChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapChoice::All => f.write_str("all"),
            TapChoice::Last => f.write_str("last"),
            TapChoice::Auto => f.write_str("auto"),
            TapChoice::List(l) => {
                let parts: Vec<String> = l.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for TapChoice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TapChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl TapChoice {
    /// Fixed tap sets; `Auto` must be resolved by selection first.
    pub fn fixed(&self, backbone: &BackboneSpec) -> Result<Option<TapSet>> {
        Ok(match self {
            TapChoice::All => Some(TapSet::all(backbone)),
            TapChoice::Last => Some(TapSet::last(backbone)),
            TapChoice::Auto => None,
            TapChoice::List(l) => Some(TapSet::new(l.clone(), backbone).map_err(|e| UsageError(format!("--taps: {e}")))?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Resize and center-crop to `[height, width]`.
    pub resize: Option<[usize; 2]>,
    /// Subtract the per-channel mean of the training split.
    pub subtract_mean: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { resize: None, subtract_mean: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Epochs of chain training on a synthetic source task; 0 disables.
    pub epochs: usize,
    /// Added to the run seed to derive the source task and its initialization.
    pub seed_offset: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 0, seed_offset: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub step: f64,
    pub max_entries: usize,
    pub tolerance: f64,
    /// Standard deviation of the branch classifier weights.
    pub head_std: f64,
    /// Input shape used when no dataset is given.
    pub input: [usize; 3],
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_entries: 48, tolerance: 1e-4, head_std: 0.3, input: [16, 16, 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub taps: TapChoice,
    pub mode: TrainMode,
    pub head_std: f64,
    /// Backbone layers; empty selects the built-in six-conv toy backbone.
    pub layers: Vec<BackboneLayer>,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Training settings of the off-the-shelf cells in `diagnose`.
    pub ots: TrainConfig,
    pub probe: LinearHeadConfig,
    pub synth: SynthTaskConfig,
    pub pretrain: PretrainConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            taps: TapChoice::All,
            mode: TrainMode::FineTune,
            head_std: DEFAULT_HEAD_STD,
            layers: Vec::new(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            ots: TrainConfig { lr: 0.5, mode: TrainMode::Ots, ..TrainConfig::default() },
            probe: LinearHeadConfig::default(),
            synth: SynthTaskConfig::default(),
            pretrain: PretrainConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub taps: Option<TapChoice>,
    pub mode: Option<TrainMode>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(ExperimentConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// Applies overrides and propagates the seed and mode into every section.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = &o.taps {
            self.taps = t.clone();
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            self.ots.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
            self.ots.batch_size = b;
        }
        self.train.seed = self.seed;
        self.train.mode = self.mode;
        self.ots.seed = self.seed;
        self.ots.mode = TrainMode::Ots;
        self.synth.seed = self.seed;
        for (name, t) in [("train", &self.train), ("ots", &self.ots)] {
            t.validate().map_err(|e| UsageError(format!("[{name}] {e}")))?;
        }
        Ok(self)
    }

    pub fn init(&self) -> InitScheme {
        InitScheme::Standard { seed: self.seed, head_std: self.head_std }
    }

    pub fn backbone(&self, input: [usize; 3]) -> Result<BackboneSpec> {
        let spec = if self.layers.is_empty() {
            toy_backbone(input)
        } else {
            BackboneSpec::new(input, self.layers.clone())
        };
        spec.map_err(|e| UsageError(format!("backbone: {e}")).into())
    }

    pub fn backbone_for(&self, data: &Dataset) -> Result<BackboneSpec> {
        let shape = data.image_shape().context("dataset is empty")?;
        let (h, w, c) = shape.as_hwc().context("images are not H×W×C")?;
        self.backbone([h, w, c])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

pub fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse()
}

pub fn check_square(h: usize, w: usize) -> Result<usize> {
    if h != w {
        bail!(UsageError(format!("synthetic tasks are square, data is {h}×{w}")));
    }
    Ok(h)
}

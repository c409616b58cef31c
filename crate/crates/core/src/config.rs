//! Experiment configuration file: one TOML document with `[data]`, `[model]`,
//! `[train]`, `[loss]`, `[attack]`, `[finetune]` and `[eval]` tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::PgdConfig;
use crate::data::{Dataset, SyntheticBlobs};
use crate::encoder::{Activation, BnMode, EncoderSpec};
use crate::error::{io_err, AirError, Result};
use crate::eval::EvalConfig;
use crate::finetune::FinetuneConfig;
use crate::objectives::RegularizerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            test_samples: 256,
            size: 32,
            noise: 0.05,
        }
    }
}

/// Either a dataset descriptor on disk or generated blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Descriptor of the training split; generated blobs when absent.
    pub train: Option<PathBuf>,
    /// Descriptor of the evaluation split.
    pub test: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Tiny,
    Micro,
    Resnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub bn: BnMode,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Micro,
            bn: BnMode::Dual,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, [c, h, w]: [usize; 3]) -> EncoderSpec {
        let spec = match self.backbone {
            Backbone::Tiny => EncoderSpec::tiny(c, h, w),
            Backbone::Micro => EncoderSpec::micro(c, h, w),
            Backbone::Resnet18 => EncoderSpec::resnet18(c, h, w),
        };
        spec.with_bn_mode(self.bn).with_activation(self.activation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: RegularizerConfig,
    /// Attack used to build adversarial views during pretraining.
    pub attack: PgdConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-scale defaults: 32×32 blobs, β = 64, 20 epochs, micro backbone.
    /// The schedule period keeps the full-scale ratio `K/E = 1/20`.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                decay_period: 1,
                ..TrainConfig::default()
            },
            loss: RegularizerConfig::default(),
            attack: PgdConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AirError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Propagates shared settings into the stage configs and validates them.
    pub fn resolved(mut self) -> Result<Self> {
        self.loss.eps = self.attack.eps;
        self.train.loss = self.loss.clone();
        self.train.attack = self.attack.clone();
        let seed = self.seed;
        self.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
        self.eval.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.attack.validate()?;
        self.finetune.validate()?;
        self.eval.attack.validate()?;
        let s = &self.data.synthetic;
        if self.data.train.is_none() && (s.samples == 0 || s.size < 8) {
            return Err(AirError::Config(
                "synthetic data needs samples > 0 and size >= 8".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_set(&self) -> Result<Dataset> {
        match &self.data.train {
            Some(path) => load_descriptor(path),
            None => Ok(self.blobs(self.data.synthetic.samples, 0)),
        }
    }

    pub fn test_set(&self) -> Result<Dataset> {
        match &self.data.test {
            Some(path) => load_descriptor(path),
            None => Ok(self.blobs(self.data.synthetic.test_samples, 1)),
        }
    }

    fn blobs(&self, samples: usize, split: u64) -> Dataset {
        let s = &self.data.synthetic;
        SyntheticBlobs {
            samples,
            size: s.size,
            channels: 3,
            noise: s.noise,
            seed: crate::rng::derive_seed(self.seed, &[crate::rng::stream::DATA, split]),
        }
        .generate()
    }
}

fn load_descriptor(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(AirError::Config(format!(
            "dataset descriptor {} does not exist",
            path.display()
        )));
    }
    Dataset::from_descriptor(path)
}

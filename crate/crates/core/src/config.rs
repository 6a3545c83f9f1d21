//! Experiment configuration read from a JSON document. Unknown keys are
//! rejected at every level and all shape constraints are checked by
//! [`ExperimentConfig::validate`] before anything runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::head::{BranchConfig, HeadConfig, HeadVariant};
use crate::model::Model;
use crate::nn::mix_seed;
use crate::pmp::{GraphMode, DEFAULT_DROPOUT, DEFAULT_LEAKY_SLOPE};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadOptions {
    #[serde(default)]
    pub variant: HeadVariant,
    #[serde(default)]
    pub branch_dim: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f32,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f32,
    #[serde(default)]
    pub graph_mode: GraphMode,
}

fn default_dropout() -> f32 {
    DEFAULT_DROPOUT
}

fn default_leaky_slope() -> f32 {
    DEFAULT_LEAKY_SLOPE
}

impl Default for HeadOptions {
    fn default() -> Self {
        HeadOptions {
            variant: HeadVariant::default(),
            branch_dim: None,
            dropout: DEFAULT_DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            graph_mode: GraphMode::default(),
        }
    }
}

/// Where the data comes from: a dataset directory written by `gen`, or the
/// built-in four-class synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOptions {
    /// Directory holding `train/` and `test/` datasets; overrides generation.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Pixel noise standard deviation; `None` keeps the generator default.
    #[serde(default)]
    pub noise: Option<f32>,
    /// Resample every training class to this count before splitting.
    #[serde(default)]
    pub balance_target: Option<usize>,
}

fn default_per_class() -> usize {
    100
}

fn default_test_per_class() -> usize {
    25
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            path: None,
            per_class: default_per_class(),
            test_per_class: default_test_per_class(),
            noise: None,
            balance_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_small")]
    pub small: BranchConfig,
    #[serde(default = "default_large")]
    pub large: BranchConfig,
    #[serde(default)]
    pub head: HeadOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataOptions,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_small() -> BranchConfig {
    BranchConfig::new(1, 8, 3)
}

fn default_large() -> BranchConfig {
    BranchConfig::new(2, 4, 3)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: default_out(),
            backbone: BackboneConfig::default(),
            small: default_small(),
            large: default_large(),
            head: HeadOptions::default(),
            train: TrainConfig::default(),
            data: DataOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Synthetic generator classes; the head's class count follows them.
    pub const CLASSES: usize = 4;

    pub fn head_config(&self, variant: HeadVariant) -> HeadConfig {
        let mut hc = HeadConfig::new(self.small, self.large, Self::CLASSES);
        hc.variant = variant;
        hc.branch_dim = self.head.branch_dim;
        hc.dropout = self.head.dropout;
        hc.leaky_slope = self.head.leaky_slope;
        hc.graph_mode = self.head.graph_mode;
        hc
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let side = self.backbone.stage_side(3);
        self.head_config(self.head.variant).validate(side, side)?;
        self.train.validate()?;
        if self.data.path.is_none() {
            if self.data.per_class < self.train.folds {
                return Err(Error::Config(format!(
                    "data.per_class {} is smaller than train.folds {}",
                    self.data.per_class, self.train.folds
                )));
            }
            self.train_spec().validate()?;
        }
        if self.data.balance_target == Some(0) {
            return Err(Error::Config("data.balance_target must be positive".into()));
        }
        Ok(())
    }

    /// Generator settings for the training pool.
    pub fn train_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::four_class(self.backbone.side, mix_seed(self.seed, 1));
        if let Some(noise) = self.data.noise {
            spec.noise = noise;
        }
        spec
    }

    /// Generator settings for the held-out test set.
    pub fn test_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: mix_seed(self.seed, 2),
            ..self.train_spec()
        }
    }

    /// Model initialized from the global seed and `salt` (fold or repeat).
    pub fn init_model(&self, variant: HeadVariant, salt: u64) -> Result<Model> {
        Model::init(self.backbone.clone(), self.head_config(variant), mix_seed(self.seed, 100 + salt))
    }
}

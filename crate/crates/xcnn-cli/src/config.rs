//! Flat `key = value` run configuration.
//!
//! A config file is plain text: one assignment per line, `#` starts a
//! comment, unknown keys are errors (typos must not silently become
//! defaults). Command-line flags override file values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use xcnn_core::data::{AugmentationPolicy, SplitRatios};
use xcnn_core::train::TrainConfig;

use crate::error::{config_err, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    CustomCnn,
    FeatureHead,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::CustomCnn => "custom-cnn",
            Arch::FeatureHead => "feature-head",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    InverseFrequency,
    Uniform,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::InverseFrequency => "inverse-frequency",
            WeightMode::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundMode {
    Mean,
    Zero,
}

impl fmt::Display for BackgroundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackgroundMode::Mean => "mean",
            BackgroundMode::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Standard,
    Wide,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Standard => "standard",
            Precision::Wide => "wide",
        })
    }
}

/// Values the CLI flags may override after the file is read.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid: Option<usize>,
    pub budget: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub image_size: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub arch: Arch,
    pub feature_dim: usize,
    pub hidden: usize,
    pub head_dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_mode: WeightMode,
    pub rotation: f64,
    pub crop: f64,
    pub flip: f64,
    pub grid: usize,
    pub budget: usize,
    pub background: BackgroundMode,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let aug = AugmentationPolicy::default();
        RunConfig {
            dataset: None,
            features: None,
            image_size: 256,
            ratios: SplitRatios::default(),
            seed: 0,
            arch: Arch::CustomCnn,
            feature_dim: 2048,
            hidden: 5461,
            head_dropout: 0.5,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            weight_mode: WeightMode::InverseFrequency,
            rotation: aug.rotation_degrees,
            crop: aug.crop_fraction,
            flip: aug.flip_probability,
            grid: 16,
            budget: 1024,
            background: BackgroundMode::Mean,
            precision: Precision::Standard,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("key `{key}`: cannot parse `{value}` ({e})"))
}

impl RunConfig {
    /// Reads the file, applies flag overrides, and validates what can be
    /// checked without knowing the command.
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(config_err)?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(grid) = overrides.grid {
            cfg.grid = grid;
        }
        if let Some(budget) = overrides.budget {
            cfg.budget = budget;
        }
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        for (number, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", number + 1))?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| format!("line {}: {e}", number + 1))?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "features" => self.features = Some(PathBuf::from(value)),
            "image_size" => self.image_size = parse_num(key, value)?,
            "train_ratio" => self.ratios.train = parse_num(key, value)?,
            "val_ratio" => self.ratios.val = parse_num(key, value)?,
            "test_ratio" => self.ratios.test = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "arch" => {
                self.arch = match value {
                    "custom-cnn" => Arch::CustomCnn,
                    "feature-head" => Arch::FeatureHead,
                    other => {
                        return Err(format!(
                            "key `arch`: `{other}` is not one of custom-cnn, feature-head"
                        ))
                    }
                }
            }
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "head_dropout" => self.head_dropout = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "class_weights" => {
                self.weight_mode = match value {
                    "inverse-frequency" => WeightMode::InverseFrequency,
                    "uniform" => WeightMode::Uniform,
                    other => {
                        return Err(format!(
                            "key `class_weights`: `{other}` is not one of inverse-frequency, uniform"
                        ))
                    }
                }
            }
            "rotation" => self.rotation = parse_num(key, value)?,
            "crop" => self.crop = parse_num(key, value)?,
            "flip" => self.flip = parse_num(key, value)?,
            "grid" => self.grid = parse_num(key, value)?,
            "budget" => self.budget = parse_num(key, value)?,
            "background" => {
                self.background = match value {
                    "mean" => BackgroundMode::Mean,
                    "zero" => BackgroundMode::Zero,
                    other => {
                        return Err(format!(
                            "key `background`: `{other}` is not one of mean, zero"
                        ))
                    }
                }
            }
            "precision" => {
                self.precision = match value {
                    "standard" => Precision::Standard,
                    "wide" => Precision::Wide,
                    other => {
                        return Err(format!(
                            "key `precision`: `{other}` is not one of standard, wide"
                        ))
                    }
                }
            }
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        self.ratios.validate().map_err(|e| e.to_string())?;
        self.train_config().validate().map_err(|e| e.to_string())?;
        self.augmentation().validate()?;
        if self.arch == Arch::CustomCnn && (self.image_size == 0 || self.image_size % 8 != 0) {
            return Err(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.hidden == 0 {
            return Err("hidden width must be >= 1".into());
        }
        if self.grid == 0 {
            return Err("grid must be >= 1".into());
        }
        if self.budget < 3 {
            return Err(format!("budget {} is too small to fit anything", self.budget));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            rotation_degrees: self.rotation,
            crop_fraction: self.crop,
            flip_probability: self.flip,
        }
    }

    /// The dataset root, checked to exist.
    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        let path = self
            .dataset
            .as_deref()
            .ok_or_else(|| config_err("config sets no `dataset` root"))?;
        if !path.is_dir() {
            return Err(config_err(format!(
                "dataset root {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    /// The feature CSV, checked to exist.
    pub fn features_path(&self) -> Result<&Path, CliError> {
        let path = self
            .features
            .as_deref()
            .ok_or_else(|| config_err("config sets no `features` file"))?;
        if !path.is_file() {
            return Err(config_err(format!(
                "features file {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    /// The fully-resolved key = value view recorded in the manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        if let Some(p) = &self.dataset {
            put("dataset", p.display().to_string());
        }
        if let Some(p) = &self.features {
            put("features", p.display().to_string());
        }
        put("image_size", self.image_size.to_string());
        put("train_ratio", self.ratios.train.to_string());
        put("val_ratio", self.ratios.val.to_string());
        put("test_ratio", self.ratios.test.to_string());
        put("seed", self.seed.to_string());
        put("arch", self.arch.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("hidden", self.hidden.to_string());
        put("head_dropout", self.head_dropout.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("epsilon", self.epsilon.to_string());
        put("class_weights", self.weight_mode.to_string());
        put("rotation", self.rotation.to_string());
        put("crop", self.crop.to_string());
        put("flip", self.flip.to_string());
        put("grid", self.grid.to_string());
        put("budget", self.budget.to_string());
        put("background", self.background.to_string());
        put("precision", self.precision.to_string());
        map
    }
}

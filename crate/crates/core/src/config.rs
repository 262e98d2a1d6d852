//! Experiment configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::fpm::Selection;
use crate::objective::Pooling;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Built-in seeded generator.
    Synthetic,
    /// Directory with the four MNIST IDX files.
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub normal_classes: Vec<usize>,
    /// Synthetic only.
    pub synthetic: SyntheticKind,
    /// Synthetic only.
    pub classes: usize,
    /// Synthetic only; images are square.
    pub image_size: usize,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            normal_classes: vec![0, 1, 2, 3, 4],
            synthetic: SyntheticKind::Blobs,
            classes: 10,
            image_size: 28,
            train_per_class: Some(100),
            test_per_class: Some(40),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder and decoder depth `N`.
    pub depth: usize,
    /// Embedding width `e`.
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// Width `d` of the purification query/key projections.
    pub proj_dim: usize,
    /// Whether the patch projection, positional table and cls token are
    /// trained. When frozen they act as a fixed random backbone.
    pub train_embedder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            dim: 64,
            heads: 4,
            patch: 7,
            proj_dim: 64,
            train_embedder: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpmMode {
    Off,
    Auto,
    Topk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpmConfig {
    pub mode: FpmMode,
    /// Absolute `k`; takes precedence over `k_fraction`.
    pub k: Option<usize>,
    pub k_fraction: f64,
    pub tau: f64,
}

impl Default for FpmConfig {
    fn default() -> Self {
        FpmConfig {
            mode: FpmMode::Topk,
            k: None,
            k_fraction: 0.5,
            tau: 1.0,
        }
    }
}

impl FpmConfig {
    /// Concrete selection rule for `tokens` patch tokens.
    pub fn selection(&self, tokens: usize) -> Result<Selection> {
        Ok(match self.mode {
            FpmMode::Off => Selection::Off,
            FpmMode::Auto => Selection::Auto { tau: self.tau },
            FpmMode::Topk => {
                let k = match self.k {
                    Some(k) => k,
                    None => {
                        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
                            return Err(Error::Config(format!(
                                "k_fraction = {} outside (0, 1]",
                                self.k_fraction
                            )));
                        }
                        ((self.k_fraction * tokens as f64).round() as usize).max(1)
                    }
                };
                if k == 0 || k > tokens {
                    return Err(Error::Config(format!("k = {k} outside 1..={tokens}")));
                }
                Selection::TopK(k)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Cross-level guided decoder; `false` swaps in plain self-attention.
    pub cfg: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { cfg: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub pooling: Pooling,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.1,
            pooling: Pooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Epoch (0-based) from which the decayed rate applies; defaults to 80%
    /// of `epochs`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 20,
            decay_epoch: None,
            decay_factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn decay_at(&self) -> usize {
        self.decay_epoch.unwrap_or(self.epochs * 4 / 5)
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        if epoch >= self.decay_at() {
            base * self.decay_factor
        } else {
            base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    /// `0` disables the PCA step.
    pub pca_dims: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Normal class whose embeddings define the single-class model.
    pub single_class: usize,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            pca_dims: 16,
            max_iter: 200,
            tol: 1e-6,
            single_class: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fpm: FpmConfig,
    pub decoder: DecoderConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub boundary: BoundaryConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tokens(&self) -> usize {
        let per_side = self.data.image_size / self.model.patch.max(1);
        per_side * per_side
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.depth", m.depth),
            ("model.dim", m.dim),
            ("model.heads", m.heads),
            ("model.patch", m.patch),
            ("model.proj_dim", m.proj_dim),
            ("optim.batch_size", self.optim.batch_size),
            ("data.image_size", self.data.image_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if m.dim % m.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dim {}", m.heads, m.dim)));
        }
        if self.data.normal_classes.is_empty() {
            return Err(Error::Config("data.normal_classes is empty".into()));
        }
        if self.data.source == DataSource::Synthetic {
            if let Some(&c) = self.data.normal_classes.iter().find(|&&c| c >= self.data.classes) {
                return Err(Error::Config(format!(
                    "normal class {c} outside the {} synthetic classes",
                    self.data.classes
                )));
            }
            if self.data.image_size % m.patch != 0 {
                return Err(Error::Config(format!(
                    "image size {} not divisible by patch {}",
                    self.data.image_size, m.patch
                )));
            }
        }
        if self.data.source == DataSource::Mnist && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for mnist".into()));
        }
        if !(0.0..=1.0).contains(&self.objective.alpha) {
            return Err(Error::Config(format!("alpha = {} outside [0, 1]", self.objective.alpha)));
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !self.data.normal_classes.contains(&self.boundary.single_class) {
            return Err(Error::Config(format!(
                "boundary.single_class {} is not a normal class",
                self.boundary.single_class
            )));
        }
        self.fpm.selection(self.tokens())?;
        Ok(())
    }
}

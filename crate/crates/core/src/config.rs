//! Declarative experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{DdimConfig, ScheduleConfig, TrainConfig, UnetConfig};
use crate::error::io_err;
use crate::registry::Attribute;
use crate::split::{TaskSpec, DEFAULT_RUN_CAP};
use crate::toy::ToySpec;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Existing manifest; ignored when `toy` is set.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Generate a toy dataset into the run directory instead.
    #[serde(default)]
    pub toy: Option<ToySpec>,
    #[serde(default = "three")]
    pub channels: usize,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub fraction: f64,
    pub axes: Vec<String>,
    pub seed: u64,
    /// Sites kept away from diffusion training entirely. For toy data the
    /// generated test sites are added automatically.
    #[serde(default)]
    pub exclude_sites: Vec<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { fraction: 0.3, axes: vec!["site".into(), "race".into()], seed: 0, exclude_sites: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub unet: UnetConfig,
    pub d_t: usize,
    /// Class width of the metadata-conditioned arm; the class-only arm uses `d_t`.
    pub d_class: usize,
    pub d_e: usize,
    /// Metadata attributes of the metadata-conditioned arm.
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UnetConfig::default(),
            d_t: 128,
            d_class: 64,
            d_e: 64,
            attributes: vec![Attribute::Site],
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct SamplingConfig {
    #[serde(default)]
    pub ddim: DdimConfig,
    #[serde(default)]
    pub seed: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub extractor_seed: u64,
    #[serde(default = "default_widths")]
    pub extractor_widths: (usize, usize),
    #[serde(default = "twenty")]
    pub n_per_class: usize,
    #[serde(default = "ten")]
    pub min_fid_samples: usize,
    /// Synthetic images per real support image in the shift study.
    #[serde(default = "one")]
    pub augmentation_ratio: usize,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "default_cap")]
    pub run_cap: usize,
}

fn default_widths() -> (usize, usize) {
    (16, 32)
}
fn twenty() -> usize {
    20
}
fn ten() -> usize {
    10
}
fn one() -> usize {
    1
}
fn default_cap() -> usize {
    DEFAULT_RUN_CAP
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 0,
            extractor_widths: default_widths(),
            n_per_class: 20,
            min_fid_samples: 10,
            augmentation_ratio: 1,
            tasks: Vec::new(),
            run_cap: DEFAULT_RUN_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Every study is repeated once per seed; the seed drives training,
    /// sampling and probe support selection.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new("")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.data.manifest.is_none() && self.data.toy.is_none() {
            return Err(Error::Config("data needs either `manifest` or `toy`".into()));
        }
        self.model.unet.validate()?;
        self.train.validate()?;
        if self.model.unet.in_channels != self.data.channels {
            return Err(Error::Config(format!(
                "model expects {} channels but data has {}",
                self.model.unet.in_channels, self.data.channels
            )));
        }
        if let Some(t) = &self.data.toy {
            if t.image_size != self.model.unet.image_size {
                return Err(Error::Config(format!(
                    "toy images are {} pixels wide but the model expects {}",
                    t.image_size, self.model.unet.image_size
                )));
            }
        }
        let k = self.model.attributes.len();
        if self.model.d_class + k * self.model.d_e != self.model.d_t {
            return Err(Error::WidthMismatch { cond: self.model.d_class + k * self.model.d_e, timestep: self.model.d_t });
        }
        Ok(())
    }
}

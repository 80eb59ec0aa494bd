//! Run configuration, loadable from JSON. Every absent key takes its default;
//! the defaults are the published model constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Total spatial stride of the backbone.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `d` after channel reduction; also the attention width `d_m`.
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of stacked fusion layers `N`.
    pub layers: usize,
    /// Backbone output channels `C`.
    pub backbone_channels: usize,
    /// FFN hidden width; `None` means `8·d_model`.
    pub ffn_dim: Option<usize>,
    pub pos_temperature: f64,
    pub post_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            n_heads: 8,
            layers: 4,
            backbone_channels: 1024,
            ffn_dim: None,
            pos_temperature: 10_000.0,
            post_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_dim.unwrap_or(8 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!("d_model {} must be a multiple of 4", self.d_model)));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if self.backbone_channels == 0 || self.backbone_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "backbone_channels {} must be a positive multiple of 4",
                self.backbone_channels
            )));
        }
        if self.ffn_width() == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        if !(self.pos_temperature > 0.0) {
            return Err(Error::Config("pos_temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Template crop side as a multiple of the target side.
    pub template_factor: f64,
    /// Search crop side as a multiple of the target side.
    pub search_factor: f64,
    pub template_size: usize,
    pub search_size: usize,
    /// Blend weight `w` of the Hann window prior.
    pub window_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            template_factor: 2.0,
            search_factor: 4.0,
            template_size: 128,
            search_size: 256,
            window_weight: 0.49,
        }
    }
}

impl TrackerConfig {
    pub fn template_grid(&self) -> usize {
        self.template_size / STRIDE
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        for (name, size) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if size == 0 || size % STRIDE != 0 {
                return Err(Error::Config(format!("{name} {size} must be a positive multiple of {STRIDE}")));
            }
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config("crop factors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(Error::Config(format!("window_weight {} outside [0, 1]", self.window_weight)));
        }
        if self.search_grid() < 2 {
            return Err(Error::Config("search grid needs at least 2 cells per side".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    /// Negative samples are down-weighted by this factor.
    pub negative_factor: f64,
    pub regression_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_giou: 2.0, lambda_l1: 5.0, negative_factor: 16.0, regression_reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.negative_factor > 0.0) || self.lambda_giou < 0.0 || self.lambda_l1 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative and negative_factor positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Multiply both learning rates by `decay_factor` every this many steps.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 1e-5,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            decay_every: None,
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr < 0.0 || self.lr_backbone < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.decay_every == Some(0) {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Maximum search-center shift, as a fraction of the search crop side.
    pub center_jitter: f64,
    /// Maximum relative brightness change of the search patch.
    pub brightness_jitter: f64,
    /// Largest frame distance between template and search frames.
    pub max_frame_gap: usize,
    pub max_resample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { seed: 0, center_jitter: 0.15, brightness_jitter: 0.2, max_frame_gap: 20, max_resample: 32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.center_jitter) || !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config("center_jitter must be in [0, 0.5), brightness_jitter in [0, 1)".into()));
        }
        if self.max_frame_gap == 0 || self.max_resample == 0 {
            return Err(Error::Config("max_frame_gap and max_resample must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub tracker: TrackerConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Desk-scale configuration used for toy training and tracking.
    pub fn toy() -> Self {
        Config {
            model: ModelConfig {
                d_model: 32,
                n_heads: 2,
                layers: 2,
                backbone_channels: 32,
                ffn_dim: Some(128),
                ..ModelConfig::default()
            },
            tracker: TrackerConfig { template_size: 32, search_size: 64, ..TrackerConfig::default() },
            optim: OptimConfig { lr_backbone: 1e-3, lr: 1e-3, ..OptimConfig::default() },
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tracker.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

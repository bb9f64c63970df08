//! Versioned JSON configuration for the model and training runs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::grid::SamplePolicy;
use crate::losses::{LossWeights, Reduction, TrackLoss};
use crate::numerics::AdamWConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Module toggles for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Skip cross-view fusion; spatial features are the input tokens.
    pub no_cvgf: bool,
    /// Skip cross-time fusion; temporal features are the input tokens.
    pub no_ctlf: bool,
    /// Let cross-view attention see every token.
    pub no_spatial_mask: bool,
    /// Widen the temporal window to the whole sequence.
    pub no_temporal_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    pub channels: usize,
    pub fusion: FusionConfig,
    pub decoder_channels: [usize; 3],
    pub track_dim: usize,
    /// Soft-argmax temperature of the tracker.
    pub temperature: f64,
    pub max_views: usize,
    pub max_times: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 3,
            fusion: FusionConfig::default(),
            decoder_channels: [32, 16, 16],
            track_dim: 16,
            temperature: 0.1,
            max_views: 8,
            max_times: 32,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.patch == 0 || self.patch % 4 != 0 {
            return Err(Error::Config(format!("patch must be a positive multiple of 4, got {}", self.patch)));
        }
        if self.decoder_channels.contains(&0) || self.track_dim == 0 || self.channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    /// Stage 1: steps per task. Stage 2 and single-stage runs: total steps.
    pub steps: usize,
    pub sample: SamplePolicy,
    /// Train on the full grid instead of sampled subgrids.
    pub no_avg: bool,
    /// Train every module jointly on the total loss instead of two stages.
    pub single_stage: bool,
    pub reduction: Reduction,
    pub track_loss: TrackLoss,
    /// 2D track coordinates are divided by this inside the tracking loss.
    pub track_pixel_scale: f64,
    /// Frozen-group checksum interval in steps.
    pub checksum_every: usize,
    /// Evaluation: depth alignment in inverse-depth space.
    pub align_disparity: bool,
    /// Evaluation: trajectory horizons for the deviation metric.
    pub horizons: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            steps: 100,
            sample: SamplePolicy {
                min_views: 1,
                max_views: 8,
                min_times: 2,
                max_times: 32,
            },
            no_avg: false,
            single_stage: false,
            reduction: Reduction::Mean,
            track_loss: TrackLoss::Chamfer,
            track_pixel_scale: 1.0,
            checksum_every: 100,
            align_disparity: false,
            horizons: [12, 24],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.track_pixel_scale.is_finite() && self.track_pixel_scale > 0.0) {
            return Err(Error::Config("track_pixel_scale must be > 0".into()));
        }
        if self.checksum_every == 0 {
            return Err(Error::Config("checksum_every must be >= 1".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be >= 1".into()));
        }
        let s = &self.sample;
        if s.min_views == 0 || s.min_times == 0 || s.min_views > s.max_views || s.min_times > s.max_times {
            return Err(Error::Config(format!("invalid sample policy {s:?}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
            if v as u32 != CONFIG_VERSION {
                return Err(Error::Version {
                    found: v as u32,
                    expected: CONFIG_VERSION,
                });
            }
        }
        let cfg: Self = serde_json::from_value(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

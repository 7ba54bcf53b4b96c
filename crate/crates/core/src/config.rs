//! Run-level configuration shared by every workflow.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::fox::{DecodeConfig, EncodeConfig};
use crate::gsca::{GscaConfig, Normalization};
use crate::losses::LossWeights;
use crate::pipeline::{ModelConfig, PipelineConfig, TrainConfig, FEATURE_STRIDE};

/// Named `(T_tr, T_tcl)` threshold pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TotalText,
    Ctw,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::TotalText, Preset::Ctw];

    pub fn thresholds(self) -> (f64, f64) {
        match self {
            Preset::TotalText => (0.7, 0.6),
            Preset::Ctw => (0.8, 0.4),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::TotalText => "total-text",
            Preset::Ctw => "ctw",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected total-text or ctw)")))
    }
}

/// Backbone width and attention flavour. The group count lives on
/// [`RunConfig::groups`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub channels: usize,
    pub head_channels: usize,
    pub normalization: Normalization,
}

impl Default for Architecture {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            channels: m.channels,
            head_channels: m.head_channels,
            normalization: m.normalization,
        }
    }
}

/// Optimizer schedule. Loss weights and the seed live on [`RunConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub final_lr_ratio: f64,
    pub batch: usize,
    pub box_jitter: f64,
    pub detach_roi: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            warmup_steps: t.warmup_steps,
            lr: t.lr,
            final_lr_ratio: t.final_lr_ratio,
            batch: t.batch,
            box_jitter: t.box_jitter,
            detach_roi: t.detach_roi,
        }
    }
}

/// Label-generation settings other than `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeTuning {
    pub shrink_ratio: f64,
    pub end_ratio: f64,
    pub min_half_width: f64,
    pub node_spacing: f64,
}

impl Default for EncodeTuning {
    fn default() -> Self {
        let e = EncodeConfig::default();
        Self {
            shrink_ratio: e.shrink_ratio,
            end_ratio: e.end_ratio,
            min_half_width: e.min_half_width,
            node_spacing: e.node_spacing,
        }
    }
}

/// Decoder settings other than `n` and the thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeTuning {
    pub dp_epsilon: f64,
    pub min_area: usize,
    pub end_ratio: f64,
    pub smooth_radius: usize,
}

impl Default for DecodeTuning {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            dp_epsilon: d.dp_epsilon,
            min_area: d.min_area,
            end_ratio: d.end_ratio,
            smooth_radius: d.smooth_radius,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    /// JSON-lines manifest; synthetic data is generated when absent.
    pub manifest: Option<PathBuf>,
    /// Directory holding a trained model.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Sample points per instance.
    pub n: usize,
    /// Attention groups; 0 replaces the block with two 1×1 convolutions.
    pub groups: usize,
    pub t_tr: f64,
    pub t_tcl: f64,
    pub weights: LossWeights,
    /// Side of the square training images.
    pub train_size: usize,
    /// Number of synthetic training images.
    pub train_count: usize,
    /// Number of synthetic held-out images.
    pub eval_count: usize,
    pub iou_threshold: f64,
    pub seed: u64,
    pub paths: RunPaths,
    pub model: Architecture,
    pub schedule: Schedule,
    pub pipeline: PipelineConfig,
    pub encode: EncodeTuning,
    pub decode: DecodeTuning,
    /// Layout of synthetic images; the canvas follows `train_size`.
    pub synth: SynthConfig,
    pub min_crop: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (t_tr, t_tcl) = Preset::TotalText.thresholds();
        Self {
            n: 8,
            groups: 4,
            t_tr,
            t_tcl,
            weights: LossWeights::default(),
            train_size: 128,
            train_count: 20,
            eval_count: 20,
            iou_threshold: 0.5,
            seed: 0,
            paths: RunPaths {
                out: PathBuf::from("out"),
                ..RunPaths::default()
            },
            model: Architecture::default(),
            schedule: Schedule::default(),
            pipeline: PipelineConfig::default(),
            encode: EncodeTuning::default(),
            decode: DecodeTuning::default(),
            synth: SynthConfig {
                gap: 12.0,
                ..SynthConfig::default()
            },
            min_crop: AugmentConfig::default().min_crop,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn apply_preset(&mut self, p: Preset) {
        (self.t_tr, self.t_tcl) = p.thresholds();
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n = {} but at least 2 sample points are needed", self.n)));
        }
        if self.groups > 0 {
            GscaConfig::new(self.model.channels, self.groups)?;
        }
        for (name, t) in [("t_tr", self.t_tr), ("t_tcl", self.t_tcl), ("iou_threshold", self.iou_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} = {t} outside (0, 1)")));
            }
        }
        let cell = FEATURE_STRIDE;
        if self.train_size == 0 || self.train_size % cell != 0 {
            return Err(Error::Config(format!(
                "train_size {} is not a positive multiple of {cell}",
                self.train_size
            )));
        }
        if self.train_count == 0 {
            return Err(Error::Config("train_count must be positive".into()));
        }
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::Config(format!("min_crop {} outside (0, 1]", self.min_crop)));
        }
        self.train_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.model.channels,
            groups: self.groups,
            normalization: self.model.normalization,
            head_channels: self.model.head_channels,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            n: self.n,
            t_tr: self.t_tr,
            t_tcl: self.t_tcl,
            dp_epsilon: self.decode.dp_epsilon,
            min_area: self.decode.min_area,
            end_ratio: self.decode.end_ratio,
            smooth_radius: self.decode.smooth_radius,
        }
    }

    pub fn encode_config(&self) -> EncodeConfig {
        let e = &self.encode;
        EncodeConfig {
            n: self.n,
            shrink_ratio: e.shrink_ratio,
            end_ratio: e.end_ratio,
            min_half_width: e.min_half_width,
            node_spacing: e.node_spacing,
        }
    }

    /// Seed of the synthetic held-out set, disjoint from the training seeds
    /// for any realistic `train_count`.
    pub fn held_out_seed(&self) -> u64 {
        self.seed.wrapping_add(1 << 32)
    }

    pub fn train_config(&self) -> TrainConfig {
        let s = &self.schedule;
        TrainConfig {
            steps: s.steps,
            warmup_steps: s.warmup_steps,
            lr: s.lr,
            final_lr_ratio: s.final_lr_ratio,
            batch: s.batch,
            seed: self.seed,
            detach_roi: s.detach_roi,
            box_jitter: s.box_jitter,
            weights: self.weights,
            ..TrainConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            h: self.train_size,
            w: self.train_size,
            ..self.synth
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            out_h: self.train_size,
            out_w: self.train_size,
            min_crop: self.min_crop,
            rotate: true,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

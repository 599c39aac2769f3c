//! Run configuration, loaded from TOML. Every field has a default and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataSpec;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters are stored rounded to `f32` after every optimizer step.
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Ema,
    SelfAttention,
    Lstm,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Ema => "ema",
            FusionMode::SelfAttention => "self_attention",
            FusionMode::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(FusionMode::Ema),
            "self_attention" => Ok(FusionMode::SelfAttention),
            "lstm" => Ok(FusionMode::Lstm),
            other => Err(Error::Config(format!(
                "unknown fusion mode `{other}` (expected ema, self_attention or lstm)"
            ))),
        }
    }
}

/// Which pair of attention inputs the memory units re-express.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryTargets {
    #[default]
    Qk,
    Qv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryNorm {
    /// Softmax over the memory axis, then L1 over the token axis.
    #[default]
    Double,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of the six visual conv layers.
    pub visual_channels: Vec<usize>,
    pub visual_strides: Vec<usize>,
    pub d_v: usize,
    pub d_i: usize,
    /// IMU samples per frame interval, endpoints included.
    pub imu_window: usize,
    pub use_wavenet: bool,
    pub wavenet_layers: usize,
    pub wavenet_channels: usize,
    pub kernel_size: usize,
    /// Hidden size of the LSTM inertial encoder used when `use_wavenet` is off.
    pub inertial_lstm_hidden: usize,
    pub fusion: FusionMode,
    /// Token count S; the fused vector is reshaped to `S x (d_v + d_i) / S`.
    pub tokens: usize,
    pub memory_slots: usize,
    pub memory_targets: MemoryTargets,
    pub memory_norm: MemoryNorm,
    pub attention_scale: bool,
    pub fusion_lstm_hidden: usize,
    pub regressor_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            visual_channels: vec![8, 16, 32, 32, 64, 64],
            visual_strides: vec![2, 2, 2, 2, 2, 1],
            d_v: 128,
            d_i: 128,
            imu_window: 11,
            use_wavenet: true,
            wavenet_layers: 4,
            wavenet_channels: 64,
            kernel_size: 2,
            inertial_lstm_hidden: 64,
            fusion: FusionMode::Ema,
            tokens: 4,
            memory_slots: 32,
            memory_targets: MemoryTargets::Qk,
            memory_norm: MemoryNorm::Double,
            attention_scale: false,
            fusion_lstm_hidden: 64,
            regressor_hidden: 128,
        }
    }
}

/// Smallest accepted image side.
pub const MIN_IMAGE_SIZE: usize = 32;

impl ModelConfig {
    /// Token width d.
    pub fn token_dim(&self) -> usize {
        (self.d_v + self.d_i) / self.tokens.max(1)
    }

    /// Width of the vector fed to the pose regressor.
    pub fn regressor_input(&self) -> usize {
        match self.fusion {
            FusionMode::Lstm => self.fusion_lstm_hidden,
            _ => self.d_v + self.d_i,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_channels", self.image_channels),
            ("d_v", self.d_v),
            ("d_i", self.d_i),
            ("imu_window", self.imu_window),
            ("wavenet_layers", self.wavenet_layers),
            ("wavenet_channels", self.wavenet_channels),
            ("kernel_size", self.kernel_size),
            ("inertial_lstm_hidden", self.inertial_lstm_hidden),
            ("tokens", self.tokens),
            ("memory_slots", self.memory_slots),
            ("fusion_lstm_hidden", self.fusion_lstm_hidden),
            ("regressor_hidden", self.regressor_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.image_height < MIN_IMAGE_SIZE || self.image_width < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image {}x{} is smaller than the visual encoder minimum {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}",
                self.image_height, self.image_width
            )));
        }
        if self.visual_channels.len() != 6 || self.visual_strides.len() != 6 {
            return Err(Error::Config(
                "model.visual_channels and model.visual_strides need six entries".into(),
            ));
        }
        if self.visual_channels.contains(&0) || self.visual_strides.contains(&0) {
            return Err(Error::Config("visual channels and strides must be positive".into()));
        }
        if !(self.d_v + self.d_i).is_multiple_of(self.tokens) {
            return Err(Error::Config(format!(
                "d_v + d_i = {} is not divisible into {} tokens",
                self.d_v + self.d_i,
                self.tokens
            )));
        }
        Ok(())
    }

    /// `1 + (k - 1) (2^layers - 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * ((1usize << self.wavenet_layers) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rot_frame: f64,
    pub lambda_rot_seq: f64,
    pub use_multistate: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rot_frame: 100.0,
            lambda_rot_seq: 100.0,
            use_multistate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Fill the `wall_ms` log column; off by default so logs are reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 200,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 50,
            log_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sub-sequence lengths in meters.
    pub lengths: Vec<f64>,
    /// Start-frame stride.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
            stride: 1,
        }
    }
}

impl EvalConfig {
    /// The road-scale lengths 100..800 m.
    pub fn full_scale() -> Self {
        Self {
            lengths: (1..=8).map(|k| 100.0 * k as f64).collect(),
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataSpec,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let m = &self.model;
        let d = &self.data;
        if (d.channels, d.height, d.width) != (m.image_channels, m.image_height, m.image_width) {
            return Err(Error::Config(format!(
                "data images {}x{}x{} do not match model input {}x{}x{}",
                d.channels, d.height, d.width, m.image_channels, m.image_height, m.image_width
            )));
        }
        if d.imu_window() != m.imu_window {
            return Err(Error::Config(format!(
                "data IMU window {} does not match model.imu_window {}",
                d.imu_window(),
                m.imu_window
            )));
        }
        if !(self.loss.lambda_rot_frame > 0.0 && self.loss.lambda_rot_seq > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !self.train.lr.is_finite() || self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.eval.lengths.is_empty() || self.eval.lengths.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(Error::Config("eval.lengths must be nonempty and positive".into()));
        }
        if self.eval.stride == 0 {
            return Err(Error::Config("eval.stride must be positive".into()));
        }
        Ok(())
    }
}

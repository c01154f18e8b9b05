//! Run configuration, loaded from TOML. Every field has a default, so an
//! empty file is valid; command-line flags override what is loaded here.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddim::{self, DdimError, NoiseSchedule};
use crate::evalkit::RegionParams;
use crate::perturb::{PerturbMode, PerturbParams, DEFAULT_STOP_FREQUENCY};
use crate::pipeline::CodecKind;
use crate::refine::{RefineOptions, DEFAULT_ROUNDS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unknown denoiser {0:?}")]
    UnknownDenoiser(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Zero,
    #[default]
    Gaussian,
    Bridge,
}

impl fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenoiserKind::Zero => "zero",
            DenoiserKind::Gaussian => "gaussian",
            DenoiserKind::Bridge => "bridge",
        })
    }
}

impl FromStr for DenoiserKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "zero" => Ok(DenoiserKind::Zero),
            "gaussian" => Ok(DenoiserKind::Gaussian),
            "bridge" => Ok(DenoiserKind::Bridge),
            other => Err(ConfigError::UnknownDenoiser(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Steps for inversion and sampling when building pairs.
    pub steps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: ddim::PAIR_STEPS,
            inference_steps: ddim::INFERENCE_STEPS,
            beta_start: ddim::DEFAULT_BETA_START,
            beta_end: ddim::DEFAULT_BETA_END,
            train_steps: ddim::DEFAULT_TRAIN_STEPS,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule, DdimError> {
        NoiseSchedule::linear_beta(self.beta_start, self.beta_end, self.train_steps, steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    pub stop_frequency: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { mode: PerturbMode::HighOnly, stop_frequency: DEFAULT_STOP_FREQUENCY, seed: 0 }
    }
}

impl PerturbConfig {
    pub fn params(&self) -> PerturbParams {
        PerturbParams { mode: self.mode, seed: self.seed, stop_frequency: self.stop_frequency }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub codec: CodecKind,
    pub denoiser: DenoiserKind,
    /// `host:port` of a bridge server.
    pub address: Option<String>,
    pub timeout_secs: u64,
    pub cond: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            codec: CodecKind::Identity,
            denoiser: DenoiserKind::Gaussian,
            address: None,
            timeout_secs: crate::bridge::DEFAULT_TIMEOUT.as_secs(),
            cond: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// `None` uses `ceil(0.01 * min(H, W))`.
    pub clean_radius: Option<usize>,
    pub box_margin: usize,
    /// `None` uses `ceil(0.02 * min(H, W))`.
    pub eval_dilate_radius: Option<usize>,
    pub rect_margin: usize,
}

impl MaskConfig {
    pub fn region_params(&self) -> RegionParams {
        RegionParams { dilate_radius: self.eval_dilate_radius, rect_margin: self.rect_margin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub rounds: usize,
    pub keep_intermediates: bool,
    pub latent_chaining: bool,
    /// Blend weight of the built-in composite operator.
    pub alpha: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { rounds: DEFAULT_ROUNDS, keep_intermediates: false, latent_chaining: false, alpha: 0.5 }
    }
}

impl RefineConfig {
    pub fn options(&self) -> RefineOptions {
        RefineOptions {
            rounds: self.rounds,
            keep_intermediates: self.keep_intermediates,
            latent_chaining: self.latent_chaining,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metric: "mse".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; `None` uses all logical cores.
    pub jobs: Option<usize>,
    pub schedule: ScheduleConfig,
    pub perturb: PerturbConfig,
    pub backend: BackendConfig,
    pub masks: MaskConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

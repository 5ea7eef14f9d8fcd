//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelSpec;
use crate::error::{HjsccError, Result};
use crate::rate_match::OptionSet;

/// Floor applied to the prior scale after the softplus mapping.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Floor on the unit-bin probability mass, `2^-64`.
pub const P_FLOOR: f64 = 5.421_010_862_427_522e-20;

/// Env var that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "HJSCC_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent channels per level, coarse to fine.
    pub channels: Vec<usize>,
    /// Total spatial downsampling of each level relative to the image.
    pub downsampling: Vec<usize>,
    /// Hidden width of every convolutional stage.
    pub width: usize,
    /// Residual blocks per bottom-up / top-down stage.
    pub blocks: usize,
    /// Residual blocks in each per-level JSCC encoder and decoder.
    pub jscc_blocks: usize,
    pub rate_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 16, 8],
            downsampling: vec![8, 4, 2],
            width: 32,
            blocks: 1,
            jscc_blocks: 2,
            rate_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Image sides must be multiples of this.
    pub fn divisibility(&self) -> usize {
        self.downsampling.first().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.channels.len();
        if l == 0 {
            return Err(HjsccError::Config("hierarchy needs at least one level".into()));
        }
        if self.downsampling.len() != l {
            return Err(HjsccError::Config(format!(
                "{} channel entries but {} downsampling factors",
                l,
                self.downsampling.len()
            )));
        }
        for &d in &self.downsampling {
            if !d.is_power_of_two() {
                return Err(HjsccError::Config(format!(
                    "downsampling factor {d} is not a power of two"
                )));
            }
        }
        for w in self.downsampling.windows(2) {
            if w[1] >= w[0] {
                return Err(HjsccError::Config(
                    "downsampling factors must strictly decrease from coarse to fine".into(),
                ));
            }
        }
        for &c in &self.channels {
            if c == 0 || c % 2 != 0 {
                return Err(HjsccError::Config(format!(
                    "latent channel count {c} must be even and positive"
                )));
            }
        }
        if self.width == 0 {
            return Err(HjsccError::Config("width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    /// Side-information bits per length index.
    pub n_q: u32,
    /// Spatial grouping patch `(p_h, p_w)`.
    pub patch: (usize, usize),
    /// Explicit per-level option sets; derived from `n_q` when absent.
    pub options: Option<Vec<Vec<usize>>>,
    /// Bits per channel use on the side-information link. Defaults to the
    /// Shannon capacity of the forward channel.
    pub side_info_capacity: Option<f64>,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            n_q: 4,
            patch: (2, 2),
            options: None,
            side_info_capacity: None,
        }
    }
}

impl RateConfig {
    pub fn option_sets(&self, model: &ModelConfig) -> Result<Vec<OptionSet>> {
        let sets = match &self.options {
            Some(explicit) => {
                if explicit.len() != model.levels() {
                    return Err(HjsccError::Config(format!(
                        "{} option sets for {} levels",
                        explicit.len(),
                        model.levels()
                    )));
                }
                explicit
                    .iter()
                    .map(|o| OptionSet::new(o.clone()))
                    .collect::<Result<Vec<_>>>()?
            }
            None => model
                .channels
                .iter()
                .map(|&c| OptionSet::uniform_even(c, self.n_q))
                .collect::<Result<Vec<_>>>()?,
        };
        for (set, &c) in sets.iter().zip(&model.channels) {
            set.validate_for(c, self.n_q)?;
            if set.values().iter().any(|q| q % 2 != 0) {
                return Err(HjsccError::Config(
                    "length options must be even so symbols pair into complex uses".into(),
                ));
            }
        }
        Ok(sets)
    }

    pub fn capacity(&self, snr_db: f64) -> f64 {
        self.side_info_capacity
            .unwrap_or_else(|| crate::channel::shannon_capacity(snr_db))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    /// Rate scale used at evaluation when no sweep is requested.
    pub alpha: f64,
    /// Training draws one value per step from this grid.
    pub alpha_grid: Vec<f64>,
    /// Prior scale of the feedback objective; only shifts reported rates.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 64.0,
            alpha: 0.5,
            alpha_grid: vec![0.25, 0.5, 1.0],
            beta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub seed: u64,
    pub crop_size: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Train the feedback variant.
    pub feedback: bool,
    /// Draw the training SNR uniformly from this list each step instead of
    /// using the fixed channel SNR.
    pub snr_grid_db: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            learning_rate: 2e-3,
            lr_floor: 0.05,
            seed: 0,
            crop_size: 32,
            log_every: 10,
            checkpoint_every: 200,
            feedback: false,
            snr_grid_db: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rate: RateConfig,
    pub loss: LossConfig,
    pub channel: ChannelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            rate: RateConfig::default(),
            loss: LossConfig::default(),
            channel: ChannelSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.channel.validate()?;
        self.rate.option_sets(&self.model)?;
        if self.rate.patch.0 == 0 || self.rate.patch.1 == 0 {
            return Err(HjsccError::Config("patch size must be positive".into()));
        }
        if !(self.loss.alpha > 0.0) || self.loss.alpha_grid.iter().any(|a| !(*a > 0.0)) {
            return Err(HjsccError::Config("alpha values must be positive".into()));
        }
        if self.loss.alpha_grid.is_empty() {
            return Err(HjsccError::Config("alpha grid is empty".into()));
        }
        if !(self.loss.lambda >= 0.0) || !(self.loss.beta > 0.0) {
            return Err(HjsccError::Config("lambda must be >= 0 and beta > 0".into()));
        }
        if !self.train.crop_size.is_multiple_of(self.model.divisibility()) {
            return Err(HjsccError::Config(format!(
                "crop size {} not divisible by {}",
                self.train.crop_size,
                self.model.divisibility()
            )));
        }
        if self.train.batch_size == 0 {
            return Err(HjsccError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

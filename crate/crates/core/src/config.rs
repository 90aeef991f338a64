//! Run configuration read from JSON by the command-line tool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::{DiscriminatorMode, GeneratorLoss, ModelOptions, PatchReduce, TrainerConfig};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::params::AdamConfig;
use crate::pyramid::PyramidConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small widths for CPU-scale runs; every architecture key may be overridden.
    #[default]
    Desk,
    /// Full-size widths with the stage count, scale width, attention ratio and
    /// batch sizes pinned.
    Full,
}

/// Full-profile image sizes.
pub const FULL_SIZES: [usize; 2] = [320, 512];

/// Architecture keys left unset fall back to the profile's values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_ouns: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oun_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_reduction: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_levels: Option<usize>,
    pub lr: f64,
    pub betas: (f64, f64),
    pub lambda_task: f64,
    pub k_disc: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub epochs: usize,
    pub generator_loss: GeneratorLoss,
    pub discriminator_mode: DiscriminatorMode,
    pub patch_reduce: PatchReduce,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_widths: Option<[usize; 3]>,
    pub use_decoder: bool,
    pub decoder_pretrain_steps: usize,
    /// `false` trains the source-only baseline.
    pub adversarial: bool,
    pub augment: bool,
    /// Training always runs single-threaded and seeded, so both settings give
    /// identical artifacts; the key is kept so configs can state the intent.
    pub determinism: bool,
    pub log_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let t = TrainerConfig::default();
        RunConfig {
            seed: 0,
            profile: Profile::Desk,
            image_size: None,
            backbone_channels: None,
            num_ouns: None,
            oun_depth: None,
            scale_channels: None,
            attention_reduction: None,
            pool_levels: None,
            lr: adam.lr,
            betas: (adam.beta1, adam.beta2),
            lambda_task: t.lambda_task,
            k_disc: t.k_disc,
            batch_source: t.batch_source,
            batch_target: t.batch_target,
            epochs: t.epochs,
            generator_loss: t.generator_loss,
            discriminator_mode: DiscriminatorMode::Fc,
            patch_reduce: PatchReduce::Mean,
            disc_widths: None,
            use_decoder: false,
            decoder_pretrain_steps: 0,
            adversarial: true,
            augment: false,
            determinism: true,
            log_interval: t.log_interval,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn image_size(&self) -> usize {
        self.pyramid().input_size
    }

    pub fn pyramid(&self) -> PyramidConfig {
        let mut p = match self.profile {
            Profile::Desk => PyramidConfig::desk(),
            Profile::Full => PyramidConfig::full(self.image_size.unwrap_or(FULL_SIZES[0])),
        };
        if let Some(v) = self.image_size {
            p.input_size = v;
        }
        if let Some(v) = &self.backbone_channels {
            p.backbone_channels = v.clone();
        }
        if let Some(v) = self.num_ouns {
            p.num_ouns = v;
        }
        if let Some(v) = self.oun_depth {
            p.oun_depth = v;
        }
        if let Some(v) = self.scale_channels {
            p.scale_channels = v;
        }
        if let Some(v) = self.attention_reduction {
            p.attention_reduction = v;
        }
        if let Some(v) = self.pool_levels {
            p.pool_levels = v;
        }
        p
    }

    pub fn model_options(&self) -> ModelOptions {
        let base = match self.profile {
            Profile::Desk => ModelOptions::desk(),
            Profile::Full => ModelOptions::full(),
        };
        ModelOptions {
            discriminator: self.discriminator_mode,
            patch_reduce: self.patch_reduce,
            disc_widths: self.disc_widths.unwrap_or(base.disc_widths),
            use_decoder: self.use_decoder,
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            lambda_task: self.lambda_task,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.betas.0,
                beta2: self.betas.1,
                ..AdamConfig::default()
            },
            batch_source: self.batch_source,
            batch_target: self.batch_target,
            k_disc: self.k_disc,
            epochs: self.epochs,
            seed: self.seed,
            generator_loss: self.generator_loss,
            log_interval: self.log_interval,
            augment: self.augment.then(AugmentConfig::default),
            adversarial: self.adversarial,
            decoder_pretrain_steps: self.decoder_pretrain_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile == Profile::Full {
            let pinned = [
                ("num_ouns", self.num_ouns, 6),
                ("scale_channels", self.scale_channels, 256),
                ("attention_reduction", self.attention_reduction, 8),
                ("batch_source", Some(self.batch_source), 5),
                ("batch_target", Some(self.batch_target), 5),
            ];
            for (key, got, want) in pinned {
                if let Some(v) = got.filter(|&v| v != want) {
                    return Err(Error::Config(format!(
                        "{key} is fixed at {want} in the full profile, got {v}"
                    )));
                }
            }
            if let Some(s) = self.image_size.filter(|s| !FULL_SIZES.contains(s)) {
                return Err(Error::Config(format!(
                    "image_size must be one of {FULL_SIZES:?} in the full profile, got {s}"
                )));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.disc_widths.is_some_and(|w| w.contains(&0)) {
            return Err(Error::Config("disc_widths must be positive".into()));
        }
        self.pyramid().validate()?;
        self.trainer().validate()
    }
}

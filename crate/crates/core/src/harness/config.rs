//! Run configuration: a TOML file of `key = value` lines with `[section]` headers.
//!
//! ```toml
//! task = "generate"        # or "stain"
//! seed = 0
//! steps = 3000
//! batch = 32
//! lr = 1e-4
//! dropout = 0.1
//! align = "mupad"          # mupad | repa | naive
//!
//! [model]
//! depth = 4
//! dim = 64
//! variant = "dca"          # dca | shared
//!
//! [loss]
//! patch = 1.0
//! cls = 0.1
//! align = 0.5
//!
//! [sampler]
//! steps = 250
//! mode = "sde"
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected. `MUPAD_SEED` overrides `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::encoder::IMAGE_CHANNELS;
use crate::conditioning::{ENCODER_WIDTH, LATENT_FACTOR, TEACHER_WIDTH};
use crate::data::{IMAGE_SIZE, MARKER_CHANNELS};
use crate::error::{MupadError, Result};
use crate::flow::{GuidanceSchedule, SamplerConfig, SamplerMode};
use crate::io::binary::{read_file, write_file};
use crate::model::ModelConfig;
use crate::objectives::{AlignVariant, LossWeights, DEFAULT_DROPOUT};

pub const SEED_ENV: &str = "MUPAD_SEED";

/// What the denoiser learns to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// H&E-like patches from image, text and pathway conditions.
    Generate,
    /// Marker channel groups from an H&E structural latent and its image tokens.
    Stain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub mode: SamplerMode,
    pub noise_scale: f64,
    pub guidance_start: f64,
    pub guidance_end: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let g = GuidanceSchedule::default();
        SamplerSettings {
            steps: s.steps,
            mode: s.mode,
            noise_scale: s.noise_scale,
            guidance_start: g.w_start,
            guidance_end: g.w_end,
        }
    }
}

impl SamplerSettings {
    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            mode: self.mode,
            noise_scale: self.noise_scale,
            seed,
        }
    }

    pub fn guidance(&self) -> GuidanceSchedule {
        GuidanceSchedule {
            w_start: self.guidance_start,
            w_end: self.guidance_end,
            ..GuidanceSchedule::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub ema_decay: f64,
    /// Checkpoint interval in steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    pub align: AlignVariant,
    /// Block whose features are aligned; defaults to the middle block.
    pub align_layer: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub sampler: SamplerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Generate,
            seed: 0,
            steps: 3000,
            batch: 32,
            lr: 1e-4,
            weight_decay: 0.0,
            dropout: DEFAULT_DROPOUT,
            ema_decay: mupad_tensor::optim::DEFAULT_EMA_DECAY,
            checkpoint_every: 1000,
            align: AlignVariant::Mupad,
            align_layer: None,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            sampler: SamplerSettings::default(),
        }
    }
}

/// Latent shape of a `[3, 32, 32]` image after the space-to-depth codec.
pub fn image_latent_shape() -> [usize; 3] {
    let s = IMAGE_SIZE / LATENT_FACTOR;
    [IMAGE_CHANNELS * LATENT_FACTOR * LATENT_FACTOR, s, s]
}

impl RunConfig {
    /// Defaults for the staining task: structural latent input and one output per channel group.
    pub fn stain() -> Self {
        let mut c = RunConfig {
            task: Task::Stain,
            ..RunConfig::default()
        };
        c.model.struct_channels = image_latent_shape()[0];
        c.model.num_groups = crate::conditioning::group_count(MARKER_CHANNELS);
        c
    }

    pub fn align_layer(&self) -> usize {
        self.align_layer
            .unwrap_or_else(|| crate::objectives::Aligner::middle_layer(self.model.depth))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(MupadError::Config(m));
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.align_layer() >= self.model.depth {
            return fail(format!("align_layer {} >= depth {}", self.align_layer(), self.model.depth));
        }
        if self.model.latent_shape != image_latent_shape() {
            return fail(format!(
                "latent_shape {:?} does not match the image codec {:?}",
                self.model.latent_shape,
                image_latent_shape()
            ));
        }
        let (gh, gw) = self.model.grid();
        let teacher = IMAGE_SIZE / 8;
        if self.align != AlignVariant::Naive && (gh, gw) != (teacher, teacher) {
            return fail(format!("model grid {gh}x{gw} differs from the teacher grid {teacher}x{teacher}"));
        }
        if self.model.image_cond_dim != ENCODER_WIDTH || self.model.cls_dim != ENCODER_WIDTH {
            return fail(format!("image_cond_dim and cls_dim must equal the encoder width {ENCODER_WIDTH}"));
        }
        match self.task {
            Task::Stain if self.model.struct_channels != image_latent_shape()[0] || self.model.num_groups == 0 => {
                fail("stain task needs struct_channels = 48 and num_groups > 0".into())
            }
            Task::Generate if self.model.struct_channels != 0 || self.model.num_groups != 0 => {
                fail("generate task takes no structural latent or groups".into())
            }
            _ => Ok(()),
        }
    }

    pub fn teacher_dim(&self) -> usize {
        TEACHER_WIDTH
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| MupadError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Reads a file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read_file(path)?)
            .map_err(|_| MupadError::Config(format!("{}: not utf-8", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        c.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml().as_bytes())
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| MupadError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [RunConfig::default(), RunConfig::stain()] {
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert_eq!(RunConfig::default().lr, 1e-4);
        assert_eq!(RunConfig::default().dropout, 0.1);
    }

    #[test]
    fn sections_and_partial_keys() {
        let c = RunConfig::from_toml("seed = 7\nalign = \"repa\"\n[model]\nvariant = \"shared\"\ndepth = 2\n[loss]\ncls = 0.0\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.align, AlignVariant::Repa);
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.model.dim, 64);
        assert_eq!(c.loss.cls, 0.0);
        assert_eq!(c.loss.patch, 1.0);
        assert_eq!(c.align_layer(), 0);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::from_toml("sed = 1").is_err());
        assert!(RunConfig::from_toml("[model]\ndim = 63").is_err());
        assert!(RunConfig::from_toml("dropout = 2.0").is_err());
        assert!(RunConfig::from_toml("align = \"other\"").is_err());
    }

    #[test]
    fn seed_override() {
        let mut c = RunConfig::default();
        c.apply_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        c.apply_seed_override(None).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_override(Some("x")).is_err());
    }
}

//! Training configuration and its flat key-value file form.
//!
//! The file is TOML with top-level keys only, for example
//!
//! ```toml
//! variant = "huber+mt+s"
//! profile = "toy"
//! learning_rate = 0.001
//! K = 2
//! ```
//!
//! Keys not present keep their defaults for the chosen profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::{BackboneConfig, Profile};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::nn::AdamConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub backbone_lr_multiplier: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub pixels_per_image: usize,
    pub variant: Variant,
    pub seed: u64,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    #[serde(rename = "K")]
    pub k: usize,
    pub rank: usize,
    /// Class-reweighting strength.
    pub alpha: f64,
    /// Side of the square training canvas.
    pub canvas: usize,
    /// Fraction of the dataset held out for validation.
    pub validation_fraction: f64,
    /// Validate every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Full)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (canvas, pixels, rank) = match profile {
            Profile::Full => (512, 2048, 512),
            Profile::Toy => (64, 256, 32),
        };
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            backbone_lr_multiplier: 0.5,
            epochs: 500,
            max_steps: None,
            pixels_per_image: pixels,
            variant: Variant::HUBER_MT_S,
            seed: 0,
            loss: LossConfig::default(),
            backbone: BackboneConfig::for_profile(profile),
            k: 2,
            rank,
            alpha: 0.8,
            canvas,
            validation_fraction: 10.0 / 70.0,
            validate_every: 1,
            grad_clip: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self::for_profile(Profile::Toy)
    }

    /// Sets the variant and the matching loss kind.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.loss.kind = variant.loss;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            variant: self.variant,
            rank: self.rank,
            k: self.k,
            parse_classes: self.loss.parse_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("validation_fraction upper bound", 1.0 - self.validation_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.backbone_lr_multiplier >= 0.0) {
            return Err(Error::Config("backbone_lr_multiplier must be nonnegative".into()));
        }
        if !(self.validation_fraction >= 0.0) {
            return Err(Error::Config("validation_fraction must be nonnegative".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("pixels_per_image", self.pixels_per_image),
            ("canvas", self.canvas),
            ("validate_every", self.validate_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.loss.kind != self.variant.loss {
            return Err(Error::Config(format!(
                "loss kind {:?} disagrees with variant {}",
                self.loss.kind, self.variant
            )));
        }
        let multiple = self.backbone.downsampling();
        if self.canvas % multiple != 0 {
            return Err(Error::Config(format!("canvas {} must be a multiple of {multiple}", self.canvas)));
        }
        self.loss.validate()?;
        self.model_config().validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        ConfigFile::from_toml_str(text)?.apply(None)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ConfigFile::from(self)).expect("flat config serializes")
    }
}

/// Flat key-value view of [`TrainConfig`]; every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub backbone_lr_multiplier: Option<f64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub pixels_per_image: Option<usize>,
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub parse_classes: Option<usize>,
    pub first_layer_channels: Option<usize>,
    pub block_channels: Option<Vec<usize>>,
    pub rnn_hidden: Option<usize>,
    pub rnn_channels: Option<usize>,
    pub context_dim: Option<usize>,
    pub pretrained: Option<bool>,
    pub pretrained_path: Option<PathBuf>,
    pub canvas: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub validate_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    /// Training dataset root. Not part of [`TrainConfig`]; read by the CLI.
    pub data: Option<PathBuf>,
    /// Scene-parsing dataset root for multi-task variants.
    pub parse_data: Option<PathBuf>,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `self` with every key present in `over` replaced.
    pub fn overlaid(mut self, over: &ConfigFile) -> ConfigFile {
        macro_rules! take {
            ($($key:ident),* $(,)?) => {
                $( if over.$key.is_some() { self.$key = over.$key.clone(); } )*
            };
        }
        take!(
            profile, learning_rate, batch_size, backbone_lr_multiplier, epochs, max_steps, pixels_per_image,
            variant, seed, k, rank, alpha, delta, lambda, parse_classes, first_layer_channels, block_channels,
            rnn_hidden, rnn_channels, context_dim, pretrained, pretrained_path, canvas, validation_fraction,
            validate_every, grad_clip, beta1, beta2, epsilon, data, parse_data,
        );
        self
    }

    /// Overlays the present keys onto `base` (or the profile defaults) and validates.
    pub fn apply(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut c = match (base, self.profile) {
            (Some(b), None) => b,
            (Some(b), Some(p)) if b.backbone.profile == p => b,
            (_, p) => TrainConfig::for_profile(p.unwrap_or(Profile::Full)),
        };
        macro_rules! set {
            ($($key:ident => $($target:ident).+),* $(,)?) => {
                $( if let Some(v) = self.$key.clone() { c.$($target).+ = v; } )*
            };
        }
        set!(
            learning_rate => learning_rate,
            batch_size => batch_size,
            backbone_lr_multiplier => backbone_lr_multiplier,
            epochs => epochs,
            pixels_per_image => pixels_per_image,
            seed => seed,
            k => k,
            rank => rank,
            alpha => alpha,
            delta => loss.delta,
            lambda => loss.lambda,
            parse_classes => loss.parse_classes,
            first_layer_channels => backbone.first_layer_channels,
            block_channels => backbone.block_channels,
            rnn_hidden => backbone.rnn_hidden,
            rnn_channels => backbone.rnn_channels,
            context_dim => backbone.context_dim,
            pretrained => backbone.pretrained,
            canvas => canvas,
            validation_fraction => validation_fraction,
            validate_every => validate_every,
            beta1 => adam.beta1,
            beta2 => adam.beta2,
            epsilon => adam.epsilon,
        );
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.grad_clip.is_some() {
            c.grad_clip = self.grad_clip;
        }
        if self.pretrained_path.is_some() {
            c.backbone.pretrained_path = self.pretrained_path.clone();
        }
        if let Some(v) = self.variant {
            c = c.with_variant(v);
        }
        c.validate()?;
        Ok(c)
    }
}

impl From<&TrainConfig> for ConfigFile {
    fn from(c: &TrainConfig) -> Self {
        Self {
            profile: Some(c.backbone.profile),
            learning_rate: Some(c.learning_rate),
            batch_size: Some(c.batch_size),
            backbone_lr_multiplier: Some(c.backbone_lr_multiplier),
            epochs: Some(c.epochs),
            max_steps: c.max_steps,
            pixels_per_image: Some(c.pixels_per_image),
            variant: Some(c.variant),
            seed: Some(c.seed),
            k: Some(c.k),
            rank: Some(c.rank),
            alpha: Some(c.alpha),
            delta: Some(c.loss.delta),
            lambda: Some(c.loss.lambda),
            parse_classes: Some(c.loss.parse_classes),
            first_layer_channels: Some(c.backbone.first_layer_channels),
            block_channels: Some(c.backbone.block_channels.clone()),
            rnn_hidden: Some(c.backbone.rnn_hidden),
            rnn_channels: Some(c.backbone.rnn_channels),
            context_dim: Some(c.backbone.context_dim),
            pretrained: Some(c.backbone.pretrained),
            pretrained_path: c.backbone.pretrained_path.clone(),
            canvas: Some(c.canvas),
            validation_fraction: Some(c.validation_fraction),
            validate_every: Some(c.validate_every),
            grad_clip: c.grad_clip,
            beta1: Some(c.adam.beta1),
            beta2: Some(c.adam.beta2),
            epsilon: Some(c.adam.epsilon),
            data: None,
            parse_data: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.backbone_lr_multiplier, 0.5);
        assert_eq!(c.pixels_per_image, 2048);
        assert_eq!(c.canvas, 512);
        assert_eq!(c.alpha, 0.8);
        assert!(c.validate().is_ok());
        assert!(TrainConfig::toy().validate().is_ok());
    }

    #[test]
    fn flat_file_overrides_profile_defaults() {
        let c = TrainConfig::from_toml_str(
            "profile = \"toy\"\nvariant = \"mse\"\nlearning_rate = 0.003\nK = 3\nblock_channels = [8, 8]\nlambda = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.backbone.profile, Profile::Toy);
        assert_eq!(c.variant, Variant::MSE);
        assert_eq!(c.loss.kind, crate::losses::LossKind::Mse);
        assert_eq!(c.learning_rate, 0.003);
        assert_eq!(c.k, 3);
        assert_eq!(c.backbone.block_channels, vec![8, 8]);
        assert_eq!(c.loss.lambda, 0.0);
        assert_eq!(c.canvas, 64);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::toy().with_variant(Variant::HUBER_S);
        c.grad_clip = Some(5.0);
        c.max_steps = Some(17);
        let text = c.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml_str("learning_rate = -1.0").is_err());
        assert!(TrainConfig::from_toml_str("variant = \"l1\"").is_err());
        assert!(TrainConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(TrainConfig::from_toml_str("profile = \"toy\"\ncanvas = 60").is_err());
    }

    #[test]
    fn overlay_keeps_unset_keys() {
        let file = ConfigFile::from_toml_str("profile = \"toy\"\nseed = 3\nbatch_size = 2").unwrap();
        let flags = ConfigFile {
            seed: Some(9),
            ..ConfigFile::default()
        };
        let c = file.overlaid(&flags).apply(None).unwrap();
        assert_eq!((c.seed, c.batch_size, c.backbone.profile), (9, 2, Profile::Toy));
    }
}

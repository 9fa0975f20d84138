use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{ModelConfig, Profile};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::sstasks::{AugmentConfig, Grid, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dg,
    Da,
    Pda,
    NullHypothesis,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dg => "dg",
            Mode::Da => "da",
            Mode::Pda => "pda",
            Mode::NullHypothesis => "null_hypothesis",
        }
    }

    pub fn uses_auxiliary(self) -> bool {
        self != Mode::NullHypothesis
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dg" => Ok(Mode::Dg),
            "da" => Ok(Mode::Da),
            "pda" => Ok(Mode::Pda),
            "null_hypothesis" | "null" => Ok(Mode::NullHypothesis),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    /// Learning rates are divided by this factor...
    pub factor: f64,
    /// ...from this (zero-based) epoch on.
    pub at_epoch: usize,
}

/// Everything a training run needs. Serialized as a flat TOML document;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub task: Task,
    pub alpha: f64,
    pub optimizer: OptimizerKind,
    pub lr_main: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size_primary: usize,
    pub batch_size_auxiliary: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<LrDecay>,
    pub seed: u64,
    pub val_fraction: f64,

    pub profile: Profile,
    pub zero_init_refinement: bool,
    pub grid_side: usize,
    pub crop_size: usize,
    pub augment: bool,
    pub flip_probability: f32,
    pub photometric_strength: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<std::path::PathBuf>,
    /// Stage widths for the desk backbone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub desk_channels: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    /// PACS domain-generalization hyperparameters.
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dg,
            task: Task::Jigsaw,
            alpha: 2.0,
            optimizer: OptimizerKind::SgdMomentum,
            lr_main: 0.001,
            lr_head: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 40,
            batch_size_primary: 128,
            batch_size_auxiliary: 128,
            lr_decay: None,
            seed: 0,
            val_fraction: 0.1,
            profile: Profile::Resnet18,
            zero_init_refinement: true,
            grid_side: 3,
            crop_size: 222,
            augment: true,
            flip_probability: 0.5,
            photometric_strength: 0.4,
            pretrained: None,
            desk_channels: None,
        }
    }
}

/// Named configurations.
pub mod presets {
    use super::*;

    pub fn pacs_dg() -> TrainConfig {
        TrainConfig::default()
    }

    /// Predictive DA on CompCars: Adam, split learning rates, step decay.
    pub fn compcars_pda() -> TrainConfig {
        TrainConfig {
            mode: Mode::Pda,
            optimizer: OptimizerKind::Adam,
            alpha: 2.0,
            lr_main: 1e-4,
            lr_head: 1e-3,
            momentum: 0.0,
            weight_decay: 1e-6,
            epochs: 6,
            batch_size_primary: 16,
            batch_size_auxiliary: 16,
            lr_decay: Some(LrDecay {
                factor: 10.0,
                at_epoch: 4,
            }),
            ..TrainConfig::default()
        }
    }

    pub fn portraits_decades_pda() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            alpha: 2.0,
            ..compcars_pda()
        }
    }

    pub fn portraits_regions_pda() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            alpha: 1.0,
            ..compcars_pda()
        }
    }

    /// Minutes-scale CPU profile for synthetic data.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            profile: Profile::DeskCnn,
            optimizer: OptimizerKind::Adam,
            lr_main: 0.002,
            lr_head: 0.002,
            momentum: 0.0,
            epochs: 8,
            batch_size_primary: 16,
            batch_size_auxiliary: 16,
            crop_size: 24,
            photometric_strength: 0.2,
            ..TrainConfig::default()
        }
    }

    pub fn by_name(name: &str) -> Result<TrainConfig> {
        match name {
            "pacs_dg" => Ok(pacs_dg()),
            "compcars_pda" => Ok(compcars_pda()),
            "portraits_decades_pda" => Ok(portraits_decades_pda()),
            "portraits_regions_pda" => Ok(portraits_regions_pda()),
            "desk" => Ok(desk()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.batch_size_primary == 0 || self.batch_size_auxiliary == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.lr_main < 0.0 || self.lr_head < 0.0 || self.weight_decay < 0.0 || self.momentum < 0.0 {
            return Err(Error::Config("learning rates, momentum and weight decay must be non-negative".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.factor.is_nan() || d.factor <= 0.0 {
                return Err(Error::Config("lr_decay.factor must be positive".into()));
            }
        }
        if self.grid_side == 0 {
            return Err(Error::Config("grid_side must be positive".into()));
        }
        self.augment_config().validate(self.grid())
    }

    pub fn grid(&self) -> Grid {
        Grid::square(self.grid_side)
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_size: self.crop_size,
            flip_probability: self.flip_probability,
            photometric_strength: self.photometric_strength,
            enabled: self.augment,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr_main: self.lr_main,
            lr_head: self.lr_head,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning-rate multiplier for a zero-based epoch.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) if epoch >= d.at_epoch => 1.0 / d.factor,
            _ => 1.0,
        }
    }

    pub fn model_config(&self, num_classes: usize, num_pretext: usize, input_channels: usize) -> ModelConfig {
        ModelConfig {
            profile: self.profile,
            num_classes,
            num_pretext,
            isolation: self.mode != Mode::NullHypothesis,
            input_size: self.crop_size,
            in_channels: input_channels,
            channels: self.desk_channels.clone(),
            zero_init_refinement: self.zero_init_refinement,
            seed: crate::rng::derive_seed(self.seed, "model"),
            pretrained: self.pretrained.clone(),
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        crate::sha256_hex(self.to_toml_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_training_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 2.0);
        assert_eq!(c.lr_main, 0.001);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.epochs, 40);
        assert_eq!(c.batch_size_primary, 128);
        assert_eq!(c.batch_size_auxiliary, 128);
        assert_eq!(c.val_fraction, 0.1);
        let text = c.to_toml_string();
        assert!(text.contains("alpha = 2.0"));
    }

    #[test]
    fn pda_profiles() {
        let c = presets::compcars_pda();
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.weight_decay, 1e-6);
        assert_eq!(c.batch_size_primary, 16);
        assert_eq!((c.lr_head, c.lr_main), (1e-3, 1e-4));
        assert_eq!(c.epochs, 6);
        assert_eq!(c.alpha, 2.0);
        assert_eq!(c.lr_scale(3), 1.0);
        assert_eq!(c.lr_scale(4), 0.1);
        assert_eq!(presets::portraits_decades_pda().alpha, 2.0);
        assert_eq!(presets::portraits_regions_pda().alpha, 1.0);
        assert_eq!(presets::portraits_regions_pda().epochs, 1);
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = presets::compcars_pda();
        let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_toml_str("alpha = 1.0\nbogus = 3\n").is_err());
        let partial = TrainConfig::from_toml_str("mode = \"da\"\nalpha = 0.5\n").unwrap();
        assert_eq!(partial.mode, Mode::Da);
        assert_eq!(partial.epochs, 40);
        assert!(TrainConfig::from_toml_str("alpha = -1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("val_fraction = 1.0\n").is_err());
        assert!(TrainConfig::from_toml_str("crop_size = 100\n").is_err());
    }
}

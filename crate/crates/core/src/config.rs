//! Application configuration: one JSON file with `data`, `model`, `loss`,
//! `train`, and `postprocess` sections, every field defaulted.

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::{InferenceOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Top-level configuration for the command-line tools.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    /// Loss weights; these override `train.weights` when training via
    /// [`AppConfig::train_config`].
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub postprocess: InferenceOptions,
}

impl AppConfig {
    /// Reads and validates a JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: AppConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// The training config with the `loss` section's weights applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.loss,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use tempfile::tempdir;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = AppConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: AppConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sparse_file_fills_defaults_and_loss_section_wins() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{
                "model": {"patch_size": 64, "hd_scales": [1, 2, 3, 4]},
                "loss": {"gamma": 2.0},
                "train": {"loss": "dice", "epochs": 5}
            }"#,
        )
        .unwrap();
        let cfg = AppConfig::load(&path).unwrap();
        assert_eq!(cfg.model.patch_size, 64);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.loss, LossKind::Dice);
        let train = cfg.train_config();
        assert_eq!(train.weights.gamma, 2.0);
        assert_eq!(train.epochs, 5);
    }

    #[test]
    fn invalid_section_is_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"epochs": 0}}"#).unwrap();
        assert!(AppConfig::load(&path).is_err());
        std::fs::write(&path, "{not json").unwrap();
        assert!(AppConfig::load(&path).is_err());
        assert!(AppConfig::load(&dir.path().join("missing.json")).is_err());
    }
}

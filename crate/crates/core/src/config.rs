//! TOML run configuration: model architecture, importance scoring, selection
//! schedule and training hyperparameters in one file.
//!
//! ```toml
//! [model.vit]
//! num_classes = 4
//!
//! [model.gala]
//! temperature = 1.0
//!
//! [model]
//! schedule = [0.75, 0.5, 0.25]
//!
//! [train]
//! epochs = 30
//! learning_rate = 0.05
//! ```
//!
//! Every key is optional; omitted keys take the desk defaults. Unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model, ModelConfig::desk());
    }

    #[test]
    fn partial_overrides_and_round_trip() {
        let cfg = RunConfig::from_toml(
            "[model]\nschedule = [1.0, 0.5, 0.5]\n[model.vit]\nnum_classes = 3\n[train]\nepochs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.vit.num_classes, 3);
        assert_eq!(cfg.model.vit.embed_dim, 64);
        assert_eq!(cfg.model.schedule.keep_ratios(), &[1.0, 0.5, 0.5]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 2\n").is_err());
        assert!(RunConfig::from_toml("[model.vit]\nheads = 2\n").is_err());
    }
}

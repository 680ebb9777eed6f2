//! The single declarative run configuration and its override mechanics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::captioner::ModelConfig;
use crate::detector::DetectorConfig;
use crate::scene::SceneConfig;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "CONTEXTCAP_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error("override `{0}` must look like key=value")]
    OverrideSyntax(String),
    #[error("override `{0}` names no config key")]
    UnknownKey(String),
    #[error("{SEED_ENV}={0} is not an unsigned integer")]
    SeedEnv(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse { context: context.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON when it
    /// can be and taken as a bare string otherwise.
    pub fn with_overrides<'a>(self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(&self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(item.to_string()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node.get_mut(part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            }
            *node = value;
        }
        serde_json::from_value(tree).map_err(|e| ConfigError::Parse { context: "overrides".to_string(), message: e.to_string() })
    }

    /// Replaces the seed with the value of `CONTEXTCAP_SEED` when set.
    pub fn with_seed_env(mut self) -> Result<Self, ConfigError> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw.trim().parse().map_err(|_| ConfigError::SeedEnv(raw))?;
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json_pretty(), "test").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"model": {"d_modle": 64}}"#, "cfg.json").unwrap_err();
        assert!(err.to_string().contains("d_modle"), "{err}");
        assert!(matches!(
            RunConfig::default().with_overrides(["model.width=3"]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let cfg = RunConfig::default()
            .with_overrides(["model.d_model=32", "detector.mode=cluster", "train.lr_stage1=0.01", "seed=9"])
            .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.detector.mode, crate::detector::ProposalMode::Cluster);
        assert_eq!(cfg.train.lr_stage1, 0.01);
        assert_eq!(cfg.seed, 9);
        assert!(RunConfig::default().with_overrides(["model.d_model"]).is_err());
        assert!(RunConfig::default().with_overrides(["model.d_model=\"x\""]).is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3, "train": {"stage1_epochs": 2}}"#, "t").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.stage1_epochs, 2);
        assert_eq!(cfg.model, ModelConfig::default());
    }
}

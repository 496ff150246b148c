//! Run configuration: one JSON file, every key optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionDims;
use crate::geometry::ExpansionConfig;
use crate::net::model::ModelSpec;
use crate::net::train::TrainConfig;
use crate::Task;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training videos (`<id>.csv` + features).
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Class-name embedding table for the congruity loss.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training log / report output.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input width; 0 means "sum of the fusion dims".
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    /// Projection width for the embedding loss (expression only).
    pub emb_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden_dim: 32,
            bidirectional: true,
            emb_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub length: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { length: 64, stride: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub paths: Paths,
    pub geometry: ExpansionConfig,
    pub mel: MelConfig,
    pub fusion: FusionDims,
    pub model: ModelConfig,
    pub window: WindowConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Expr,
            seed: 0,
            paths: Paths::default(),
            geometry: ExpansionConfig::default(),
            mel: MelConfig::default(),
            fusion: FusionDims::default(),
            model: ModelConfig::default(),
            window: WindowConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.mel.validate()?;
        self.train.validate()?;
        self.model_spec().validate()?;
        if self.window.length == 0 || self.window.stride == 0 {
            return Err(Error::config("window length and stride must be at least 1"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            task: self.task,
            input_dim: if self.model.input_dim == 0 {
                self.fusion.total()
            } else {
                self.model.input_dim
            },
            hidden_dim: self.model.hidden_dim,
            bidirectional: self.model.bidirectional,
            emb_dim: self.model.emb_dim,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model_spec().input_dim, 6144);
        assert_eq!(cfg.window.length, 64);
        assert_eq!(cfg.train.gradient_clip_norm, 5.0);
    }

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"tsk": "va"}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"window": {"length": 0}}"#,
            r#"{"geometry": {"lambda_x": -1.0}}"#,
            r#"{"task": "va", "model": {"emb_dim": 4}}"#,
        ] {
            let e = RunConfig::from_json(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }
}

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Episodic evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub inference: InferenceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_shot: 1,
            episodes: 200,
            seed: 0,
            inference: InferenceConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shot == 0 || self.episodes == 0 {
            return Err(Error::InvalidArgument("k_shot and episodes must be positive".into()));
        }
        self.inference.validate()
    }
}

/// Dataset and split selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory in the exported layout; the built-in synthetic catalog when
    /// absent.
    pub root: Option<PathBuf>,
    pub folds: usize,
    pub fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            folds: 4,
            fold: 0,
        }
    }
}

/// Everything a command-line run can configure, as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.folds == 0 || self.data.fold >= self.data.folds {
            return Err(Error::InvalidArgument(format!(
                "fold {} outside 0..{}",
                self.data.fold, self.data.folds
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"iterations": 10}, "eval": {"inference": {"samples_l": 3}}}"#)
            .unwrap();
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.eval.inference.samples_l, 3);
        assert_eq!(c.eval.inference.samples_m, 15);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }
}

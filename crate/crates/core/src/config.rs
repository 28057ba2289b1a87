//! Run configuration: one TOML document covering every command. Missing
//! keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::THRESHOLD;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: usize,
    /// Volume edge in voxels.
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases: 8,
            size: 96,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { folds: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Checkpoints to average; more than one forms an ensemble.
    pub checkpoints: Vec<PathBuf>,
    pub threshold: f32,
    /// Also write per-region probability volumes.
    pub write_probabilities: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoints: Vec::new(),
            threshold: THRESHOLD,
            write_probabilities: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of case folders.
    pub data_dir: PathBuf,
    /// Destination for phantoms, checkpoints, logs and predictions.
    pub out_dir: PathBuf,
    /// Predicted label maps for `evaluate`.
    pub pred_dir: PathBuf,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            pred_dir: PathBuf::from("runs/predictions"),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
                what: "run configuration".into(),
            });
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.synth.size < 16 {
            return Err(Error::config("synth.size must be at least 16"));
        }
        if self.cv.folds < 2 {
            return Err(Error::config("cv.folds must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(Error::config("infer.threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("[train.network]\nbase_width = 8\npatch_size = 32\n").unwrap();
        assert_eq!(cfg.train.network.base_width, 8);
        assert_eq!(cfg.train.schedule.initial_lr, 0.003);
        assert_eq!(cfg.train.network.num_scales, 5);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig::from_toml("[cv]\nfolds = 1\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}

//! Pipeline configuration file (TOML), one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cosegnet::ModelConfig;
use crate::dataset::{DatasetConfig, PreprocessConfig};
use crate::densecrf::CrfParams;
use crate::pseudomask::GrabcutParams;
use crate::training::{OptimizerConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Lesion CSV; relative paths resolve against the config file's directory.
    pub dataset: PathBuf,
    /// Root for generated masks, checkpoints, logs and predictions.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset: PathBuf::from("lesions.csv"), work_dir: PathBuf::from("work") }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessConfig,
    pub grabcut: GrabcutParams,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.dataset = base.join(&cfg.paths.dataset);
        cfg.paths.work_dir = base.join(&cfg.paths.work_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.preprocess.validate()?;
        self.grabcut.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        if self.model.input_size != self.preprocess.target_size {
            return Err(Error::Config(format!(
                "model.input_size ({}) must equal preprocess.target_size ({})",
                self.model.input_size, self.preprocess.target_size
            )));
        }
        Ok(())
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.paths.work_dir.join("masks")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.work_dir.join("manifest.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.work_dir.join("model.csgw")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.paths.work_dir.join("loss.csv")
    }
}

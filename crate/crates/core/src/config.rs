//! Run configuration file (TOML). Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SceneGenConfig;
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Labeled source set.
    pub source: Option<PathBuf>,
    /// Unlabeled target training set (masks, if present, are never read).
    pub target: Option<PathBuf>,
    /// Labeled target validation set.
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Run directories are `<out_dir>/<tag>-s<seed>`.
    pub tag: String,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub scenes: SceneGenConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            tag: "run".into(),
            out_dir: PathBuf::from("runs"),
            data: DataPaths::default(),
            arch: ArchSpec::default(),
            train: TrainConfig::default(),
            scenes: SceneGenConfig::default(),
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.scenes.validate()?;
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return Err(Error::Config(format!("tag `{}` must be a plain name", self.tag)));
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-s{}", self.tag, self.train.seed))
    }

    /// Writes the resolved configuration next to the run outputs.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

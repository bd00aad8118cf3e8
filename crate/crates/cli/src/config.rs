//! Run configuration: a TOML file with command-line overrides.

use std::path::Path;

use gmatch_core::evaluation::EvalConfig;
use gmatch_core::model::MatcherConfig;
use gmatch_core::training::{SynthConfig, TrainConfig};
use gmatch_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_KEYPOINTS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: MatcherConfig,
    pub synth: SynthConfig,
    /// Scene pairs written by `synth` and used by `train` without a scene directory.
    pub num_scenes: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Upper bound on keypoints and points per side.
    pub max_keypoints: usize,
    /// Worker threads for per-scene commands.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: MatcherConfig::default(),
            synth: SynthConfig::default(),
            num_scenes: 200,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            max_keypoints: DEFAULT_MAX_KEYPOINTS,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.ransac.validate()?;
        self.eval.gt.validate()?;
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.synth.num_points > self.max_keypoints {
            return Err(Error::Config(format!(
                "synthetic scenes with {} points exceed max_keypoints = {}",
                self.synth.num_points, self.max_keypoints
            )));
        }
        Ok(())
    }
}

//! Run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetConfig, Split};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::kinematics::HandSpec;
use crate::net::NetConfig;
use crate::objectives::ConstraintConfig;
use crate::sampler::GuidanceConfig;
use crate::train::TrainConfig;

/// Default input and output locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub poses: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "data".into(),
            checkpoint: "run/checkpoint.json".into(),
            poses: "samples/poses.jsonl".into(),
        }
    }
}

/// Which objects to sample for and how many poses each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    /// Split to sample when no object ids are given.
    pub split: Split,
    /// Explicit object ids; overrides `split` when non-empty.
    pub objects: Vec<String>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            count: 16,
            split: Split::Test,
            objects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub hand: HandSpec,
    pub diffusion: ScheduleConfig,
    pub net: NetConfig,
    /// Object points fed to the encoder.
    pub encoder_points: usize,
    pub constraints: ConstraintConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hand: HandSpec::default(),
            diffusion: ScheduleConfig::default(),
            net: NetConfig::default(),
            encoder_points: 256,
            constraints: ConstraintConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            dataset: DatasetConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hand.validate()?;
        self.diffusion.build()?;
        self.net.validate()?;
        if self.encoder_points == 0 {
            return Err(Error::InvalidConfig("encoder_points must be positive".into()));
        }
        self.constraints.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        self.eval.validate()?;
        self.dataset.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_file(path, self.to_json()?.as_bytes())
    }
}

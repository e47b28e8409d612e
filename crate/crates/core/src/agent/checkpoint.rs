//! Versioned structured-text checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::Trainer;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub trainer: Trainer,
    /// The experiment the trainer was built from.
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    /// Free-form evaluation results recorded alongside the parameters.
    #[serde(default)]
    pub evaluation: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(trainer: Trainer, seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            trainer,
            experiment: None,
            evaluation: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                message: format!(
                    "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                    ck.version
                ),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

//! Experiment files: scenario, environment and PPO sections in one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::Hyperparams;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "ScenarioConfig::stop_and_go")]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo: Hyperparams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: ScenarioConfig::stop_and_go(),
            env: EnvConfig::default(),
            ppo: Hyperparams::default(),
        }
    }
}

impl ExperimentConfig {
    /// Every problem across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.scenario.violations();
        v.extend(self.env.violations(self.scenario.grid.n_cells));
        v.extend(self.ppo.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

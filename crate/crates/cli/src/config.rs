use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use onetrans_core::bench::{Experiment, Workload};
use onetrans_core::features::SynthConfig;
use onetrans_core::train::TrainConfig;
use onetrans_core::ModelConfig;

/// Everything a command can tune. Every section is optional; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub perf: Workload,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = Experiment::default();
        Self {
            model: e.model,
            data: e.data,
            train: e.train,
            perf: Workload::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            data: self.data.clone(),
            train: self.train.clone(),
        }
    }
}

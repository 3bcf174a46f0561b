use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use relwear_core::data::GenConfig;
use relwear_core::nn::ModelConfig;
use relwear_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// When present, the dataset must have been generated with exactly this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            generator: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text).context("run config is not valid JSON")?;
        match raw.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(RUN_CONFIG_VERSION) => {}
            Some(v) => bail!("run config version {v} is not supported (expected {RUN_CONFIG_VERSION})"),
            None => bail!("run config needs a numeric \"version\" field"),
        }
        let cfg: RunConfig = serde_json::from_value(raw).context("invalid run config")?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if let Some(g) = &cfg.generator {
            g.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }
}

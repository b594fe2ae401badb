//! Engine-wide configuration file: versioned TOML, loaded by the CLI
//! and overridden by flags (flags win).

use crate::error::{EngineError, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnginePaths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for EnginePaths {
    fn default() -> Self {
        EnginePaths {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub version: u32,
    pub embed_dim: usize,
    pub heads: usize,
    pub dropout_p: f32,
    pub pooling_epsilon: f32,
    pub seed: u64,
    pub paths: EnginePaths,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            version: CONFIG_VERSION,
            embed_dim: 64,
            heads: 8,
            dropout_p: 0.1,
            pooling_epsilon: 1e-6,
            seed: 0,
            paths: EnginePaths::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(EngineError::Config(format!(
                "unsupported config version {} (engine speaks {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EngineError::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.pooling_epsilon <= 0.0 {
            return Err(EngineError::Config("pooling_epsilon must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EngineError::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: EngineConfig = toml::from_str(&text)
            .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            toml::to_string_pretty(self).map_err(|e| EngineError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

//! Runtime configuration, read from TOML.
//!
//! ```toml
//! [batching]
//! ops_per_pass = 32
//! passes_per_submit = 2
//!
//! [arena]
//! slot_bytes = 256
//! slot_count = 128
//!
//! [device]
//! force_portable = false
//! validation = false
//!
//! [tuning.matmul]
//! tile_k = 32
//! ```
//!
//! Every key is optional. `[tuning]` takes the fields of
//! [`TuningParams`](crate::kernels::TuningParams). Setting
//! `QKERN_FORCE_PORTABLE` to anything but `0` or an empty string forces the
//! workgroup-memory reduction variants regardless of the file.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::kernels::TuningParams;

pub const FORCE_PORTABLE_ENV: &str = "QKERN_FORCE_PORTABLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Batching {
    pub ops_per_pass: usize,
    pub passes_per_submit: usize,
}

impl Default for Batching {
    fn default() -> Self {
        Self {
            ops_per_pass: 32,
            passes_per_submit: 2,
        }
    }
}

impl Batching {
    pub fn new(ops_per_pass: usize, passes_per_submit: usize) -> Self {
        Self {
            ops_per_pass,
            passes_per_submit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArenaConfig {
    pub slot_bytes: u32,
    pub slot_count: u32,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self {
            slot_bytes: 256,
            slot_count: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub force_portable: bool,
    pub validation: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub batching: Batching,
    pub arena: ArenaConfig,
    pub device: DeviceConfig,
    pub tuning: TuningParams,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RuntimeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RuntimeConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batching.ops_per_pass == 0 || self.batching.passes_per_submit == 0 {
            return Err(ConfigError::Invalid("batching sizes must be positive".into()));
        }
        if self.arena.slot_count == 0 || self.arena.slot_bytes == 0 {
            return Err(ConfigError::Invalid("arena sizes must be positive".into()));
        }
        Ok(())
    }

    /// `force_portable` after the environment override.
    pub fn force_portable(&self) -> bool {
        self.device.force_portable || env_forces_portable()
    }
}

pub fn env_forces_portable() -> bool {
    std::env::var(FORCE_PORTABLE_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

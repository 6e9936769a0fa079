//! Run configuration and file helpers shared by the commands.

use std::fs;
use std::path::Path;

use regimenas_core::data::DEFAULT_Z_WINDOW;
use regimenas_core::nas::SearchConfig;
use regimenas_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Everything a search run needs. `seed` is the single source of randomness:
/// it overrides the seeds inside `search` and `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub z_window: usize,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            z_window: DEFAULT_Z_WINDOW,
            search: SearchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn resolved(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.search.seed = self.seed;
        self.train.seed = self.seed;
        self.search.validate()?;
        self.train.validate()?;
        if self.z_window < 2 {
            return Err(CliError::Config("z_window must be at least 2".into()));
        }
        Ok(self)
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Parses a JSON config; serde's message names a missing or unknown field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    read_json(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    write_text(path, &text)
}

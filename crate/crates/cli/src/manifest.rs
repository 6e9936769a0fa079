//! Per-run manifest: config hash, seed, data fingerprint, commands and artifacts.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::{read_json, write_json};
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub command: String,
    pub seed: u64,
    pub started: u64,
    pub finished: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub data_path: String,
    pub data_fingerprint: String,
    pub commands: Vec<CommandEntry>,
    /// Paths relative to the run directory.
    pub artifacts: BTreeSet<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let p = run_dir.join(MANIFEST_FILE);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(MANIFEST_FILE), self)
    }

    pub fn begin(&mut self, command: &str) {
        self.commands.push(CommandEntry {
            command: command.to_string(),
            seed: self.seed,
            started: unix_now(),
            finished: None,
        });
    }

    pub fn finish(&mut self) {
        if let Some(c) = self.commands.last_mut() {
            c.finished = Some(unix_now());
        }
    }

    pub fn add(&mut self, rel: impl Into<String>) {
        self.artifacts.insert(rel.into());
    }
}

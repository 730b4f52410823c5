//! The `manifest` file: one JSON document per run directory recording, for
//! each command that ran, the resolved configuration, seeds, software
//! version, produced artifacts, and wall-clock stage timings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CliError};

pub const MANIFEST_FILE: &str = "manifest";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunRecord {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// paths relative to the run directory, in creation order
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, u64>,
    /// command-specific facts (best epoch, accuracy, resolved target, ...)
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub runs: BTreeMap<String, RunRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            runs: BTreeMap::new(),
        }
    }
}

impl Manifest {
    fn new() -> Self {
        Manifest::default()
    }

    /// Loads the run directory's manifest, or starts a fresh one if the
    /// directory has none yet.
    pub fn load_or_new(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_err(format!("corrupt manifest {}: {e}", path.display())))
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_err(format!("corrupt manifest {}: {e}", path.display())))
    }

    /// Inserts or replaces one command's record and rewrites the file.
    pub fn record(&mut self, dir: &Path, command: &str, record: RunRecord) -> Result<(), CliError> {
        self.version = env!("CARGO_PKG_VERSION").to_string();
        self.runs.insert(command.to_string(), record);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| config_err(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text)
            .map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
    }

    pub fn note(&self, command: &str, key: &str) -> Option<&str> {
        self.runs.get(command)?.notes.get(key).map(String::as_str)
    }
}

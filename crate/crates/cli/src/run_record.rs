use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use octscreen::config::sha256_hex;
use octscreen::{Error, Result};
use serde::{Deserialize, Serialize};

pub const RUN_RECORD_FILE: &str = "run_record.json";

/// Provenance of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    /// Input artifact path to its SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub seed: Option<u64>,
}

impl RunRecord {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        RunRecord {
            command: command.to_string(),
            config_hash,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            seed,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<String> {
        let hash = file_hash(path)?;
        self.inputs.insert(path.display().to_string(), hash.clone());
        Ok(hash)
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_RECORD_FILE);
        let text = serde_json::to_string_pretty(self).expect("plain record serialises") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

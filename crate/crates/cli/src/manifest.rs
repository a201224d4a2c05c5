//! Reproduction manifest written next to every run's artifacts.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::Failure;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config: Config,
    /// Hash of the raw config file bytes.
    pub input_sha256: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<Artifact>,
    pub verdicts: BTreeMap<String, Value>,
}

/// Collects artifacts for one command and writes them under `dir`.
pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn new(command: &'static str, config: &Config, raw: &[u8], seeds: Vec<u64>) -> Result<Self, Failure> {
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            manifest: RunManifest {
                command,
                tool_version: env!("CARGO_PKG_VERSION"),
                config: config.clone(),
                input_sha256: sha256_hex(raw),
                seeds,
                outputs: Vec::new(),
                verdicts: BTreeMap::new(),
            },
        })
    }

    /// Writes `bytes` to `name` inside the output directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, Failure> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        self.record(name, bytes);
        Ok(path)
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.manifest.outputs.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn verdict(&mut self, key: &str, value: impl Into<Value>) {
        self.manifest.verdicts.insert(key.to_string(), value.into());
    }

    pub fn finish(self) -> Result<PathBuf, Failure> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, json + "\n").map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

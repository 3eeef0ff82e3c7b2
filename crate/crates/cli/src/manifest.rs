//! The `manifest.txt` written into every output directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use rcn::kv::KvMap;

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const CONFIG_PREFIX: &str = "config.";
/// Field that changes between otherwise identical runs.
pub const TIMESTAMP_KEY: &str = "created";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: KvMap,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: KvMap, seed: u64) -> Self {
        Self { command: command.to_string(), config, seed, artifacts: Vec::new() }
    }

    pub fn add(&mut self, artifact: impl Into<String>) {
        self.artifacts.push(artifact.into());
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("command", &self.command);
        kv.set("tool_version", env!("CARGO_PKG_VERSION"));
        kv.set("seed", self.seed);
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        kv.set(TIMESTAMP_KEY, secs);
        kv.set("artifacts", self.artifacts.join(","));
        for key in self.config.keys() {
            kv.set(&format!("{CONFIG_PREFIX}{key}"), self.config.get_str(key).unwrap_or_default());
        }
        kv
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_NAME), self.to_kv().to_text())?;
        Ok(())
    }
}

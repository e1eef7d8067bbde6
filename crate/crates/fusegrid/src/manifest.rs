use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_json;

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// What produced a set of artifacts. `config` is the fully resolved
/// configuration and can be passed back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Stamps the elapsed time and writes the manifest into `dir`.
    pub fn finish(mut self, dir: &Path, started: Instant) -> Result<PathBuf> {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        let path = dir.join(MANIFEST_NAME);
        write_json(&path, &self)?;
        Ok(path)
    }
}

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;

use crate::commands::Failure;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Provenance record written beside every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, config_path: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        crate::commands::write_json(&dir.join(MANIFEST_FILE), self)
    }
}

//! Run manifests: every output directory gets a `manifest.json` recording the
//! fully resolved configuration, input digests, and tool version, enough to
//! re-run the command bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// Hex SHA-256 of every input file, keyed by the path as given.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
    /// Command-specific results (convergence, restart selection, ...).
    pub results: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
            duration_seconds: 0.0,
            results: serde_json::Value::Null,
        }
    }

    pub fn digest_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.input_digests.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::data(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.json"), body + "\n")
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        Ok(())
    }
}

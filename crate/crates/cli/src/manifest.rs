//! Provenance manifests: every artifact-producing command records what went
//! in and what came out, each pinned by a SHA-256 digest. The manifest is
//! the only output that carries a timestamp, so reruns of the same inputs
//! stay byte-identical everywhere else.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::digest::file_digest;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Milliseconds since the Unix epoch at write time.
    pub timestamp_ms: u128,
    /// Input path → `sha256:<hex>`.
    pub inputs: BTreeMap<String, String>,
    /// Output path → `sha256:<hex>`.
    pub outputs: BTreeMap<String, String>,
    /// Free-form command settings worth recording (recipe, weights, …).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            settings: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn add_input_digest(&mut self, path: &Path, digest: String) {
        self.inputs.insert(path.display().to_string(), digest);
    }

    pub fn add_output(&mut self, path: &Path) -> anyhow::Result<()> {
        self.outputs
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.settings.insert(
            key.to_string(),
            serde_json::to_value(value).expect("manifest settings serialize"),
        );
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

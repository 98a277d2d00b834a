//! Run manifests written next to every output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use merank_core::backend::SimBackendConfig;
use merank_core::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments that rerun this command with identical settings.
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_file: Option<String>,
    pub inputs: BTreeMap<String, String>,
    /// Output path to `sha256:<hex>` of its contents.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_time_secs: f64,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

/// Manifest path for an output file (`out.jsonl` -> `out.jsonl.manifest.json`).
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    manifest: RunManifest,
    clock: Instant,
}

impl Recorder {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        Self {
            manifest: RunManifest {
                tool: env!("CARGO_PKG_NAME").to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                args,
                pipeline: None,
                sim: None,
                backend: None,
                config_file: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms: unix_ms(),
                finished_unix_ms: 0,
                wall_time_secs: 0.0,
                summary: serde_json::Value::Null,
            },
            clock: Instant::now(),
        }
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.manifest.inputs.insert(name.to_string(), path.display().to_string());
    }

    /// Hashes the outputs and writes the manifest to `at`.
    pub fn finish(mut self, outputs: &[&Path], at: &Path) -> Result<RunManifest, CliError> {
        for out in outputs {
            self.manifest.outputs.insert(out.display().to_string(), sha256_file(out)?);
        }
        self.manifest.finished_unix_ms = unix_ms();
        self.manifest.wall_time_secs = self.clock.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(at, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", at.display())))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: malformed manifest: {e}", path.display())))
}

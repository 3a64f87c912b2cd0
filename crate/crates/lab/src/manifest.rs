//! Run manifests: everything needed to repeat a CLI run and check that the
//! repetition produced the same bytes.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{self, LabError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    pub git_describe: String,
    /// Input file path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn save(dir: &Path, m: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    error::write(&dir.join(MANIFEST_FILE), text)
}

pub fn load(path: &Path) -> Result<Manifest> {
    let text = error::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

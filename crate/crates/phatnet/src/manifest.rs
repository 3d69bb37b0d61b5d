//! Run manifests: one JSON record per command invocation.
//!
//! Every command writes a manifest — atomically, via a temporary sibling
//! file and rename — both on success and on handled failure, so partially
//! written records never exist on disk under the final name.

use crate::error::{PhatError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// What a command ran with and what it produced.
///
/// `config` holds the full resolved configuration — defaults expanded,
/// never implicit. `wall_clock_seconds` is informational and is the one
/// field that varies between otherwise identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// "ok" or "error".
    pub status: String,
    /// Structured message for handled failures.
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Label → path of every consumed input.
    pub inputs: BTreeMap<String, String>,
    /// Label → path of every produced artifact.
    pub outputs: BTreeMap<String, String>,
    /// Label → hex SHA-256 of checkpoints read or written.
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            tool_version: crate::TOOL_VERSION.to_string(),
            status: "ok".into(),
            error: None,
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checkpoint_hashes: BTreeMap::new(),
            wall_clock_seconds: 0.0,
        }
    }

    /// Marks the manifest as a handled failure.
    pub fn set_error(&mut self, message: impl Into<String>) {
        self.status = "error".into();
        self.error = Some(message.into());
    }

    /// Serializes to pretty JSON and writes atomically.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| {
            PhatError::Config(format!("manifest serialization failed: {e}"))
        })?;
        bytes.push(b'\n');
        atomic_write(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| PhatError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| PhatError::Config(format!("malformed manifest {}: {e}", path.display())))
    }
}

/// Writes `bytes` to `path` via a temporary sibling and an atomic rename.
/// Parent directories are created as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| PhatError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| PhatError::Parameter(format!("not a file path: {}", path.display())))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

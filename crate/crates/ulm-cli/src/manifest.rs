//! Run manifest: a machine-readable record of one pipeline invocation.
//!
//! The manifest captures everything needed to audit or reproduce a run: the
//! tool version, the full configuration that was in effect (defaults
//! included), SHA-256 digests of every input and output file, and per-stage
//! wall-clock timings. Re-running the same command on the same inputs must
//! reproduce identical input/output digests; timings are informational and
//! excluded from any reproducibility comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Digest and size of a single file referenced by a manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FileEntry {
    /// Hex-encoded SHA-256 of the file contents.
    pub sha256: String,
    /// File size in bytes.
    pub bytes: u64,
}

/// Full record of one `run` invocation, serialized as pretty JSON.
///
/// All maps are ordered (`BTreeMap`) so the serialized form is byte-stable
/// for identical content.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Tool name, always `"ulm"`.
    pub tool: String,
    /// Crate version the binary was built from.
    pub version: String,
    /// Subcommand that produced this manifest.
    pub command: String,
    /// Complete configuration in effect, defaults included, as key/value text.
    pub config: BTreeMap<String, String>,
    /// Logical input name (e.g. `"stack"`) to file digest.
    pub inputs: BTreeMap<String, FileEntry>,
    /// Output file name to file digest.
    pub outputs: BTreeMap<String, FileEntry>,
    /// Stage name to elapsed milliseconds. Informational only: timings vary
    /// between runs and are not part of the reproducibility contract.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            tool: "ulm".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    /// Records the digest of an existing file under `name` in `inputs`.
    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let entry = digest_file(path)?;
        self.inputs.insert(name.to_string(), entry);
        Ok(())
    }

    /// Records the digest of an existing file under its file name in `outputs`.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let entry = digest_file(path)?;
        self.outputs.insert(name, entry);
        Ok(())
    }

    /// Serializes the manifest as pretty JSON to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).context("serializing run manifest")?;
        let mut file = fs::File::create(path)
            .with_context(|| format!("creating manifest file {}", path.display()))?;
        file.write_all(&json)?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

/// Computes the SHA-256 digest and size of the file at `path`.
pub fn digest_file(path: &Path) -> Result<FileEntry> {
    let data = fs::read(path).with_context(|| format!("reading {} for digest", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&data);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write as _;
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(FileEntry {
        sha256: hex,
        bytes: data.len() as u64,
    })
}

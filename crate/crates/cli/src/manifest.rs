//! Run manifests and provenance helpers shared by every command.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub config_paths: Vec<PathBuf>,
    /// The effective configuration after flag overrides.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub status: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub fn start<T: Serialize>(command: &str, config: &T) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            tool_version: TOOL_VERSION,
            config_paths: Vec::new(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "running".into(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
        })
    }

    /// Stamps the end time and writes the manifest. Every named output must
    /// already exist.
    pub fn finish(mut self, status: &str, path: &Path) -> Result<()> {
        self.status = status.to_owned();
        self.finished_unix_ms = unix_ms();
        for out in &self.outputs {
            anyhow::ensure!(out.exists(), "manifest names missing output {}", out.display());
        }
        write_json_atomic(path, &self)
    }
}

/// Writes pretty JSON through a sibling temporary file and a rename, so
/// readers never see a partial file.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| mstcn::Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| mstcn::Error::io(path, e))?;
    Ok(())
}

/// `<path><suffix>`, e.g. `model.ckpt` → `model.ckpt.run.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_json_atomic(&p, &serde_json::json!([1, 2])).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "[\n  1,\n  2\n]\n");
    }
}

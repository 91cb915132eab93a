//! `manifest.json`: what a run read, what it wrote, and with which settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path, display: String) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: display,
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub threads: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    /// Digest of the effective configuration (canonical JSON).
    pub config_sha256: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileDigest>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Collects inputs and artifacts while a command runs.
pub struct ManifestBuilder {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, out_dir: &Path, threads: Option<usize>) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix_s: now(),
                finished_unix_s: 0,
                threads,
                seeds: BTreeMap::new(),
                config_sha256: None,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                artifacts: Vec::new(),
            },
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        let value = serde_json::to_value(config)?;
        self.manifest.config_sha256 = Some(sha256_hex(serde_json::to_string(&value)?.as_bytes()));
        self.manifest.config = value;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let d = FileDigest::of(path, path.display().to_string())?;
        self.manifest.inputs.push(d);
        Ok(())
    }

    /// Writes `data` to `<out>/<name>` and records it.
    pub fn artifact(&mut self, name: &str, data: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifacts.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(data),
            bytes: data.len() as u64,
        });
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix_s = now();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}

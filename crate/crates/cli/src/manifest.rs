use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

/// Provenance record written at the end of every run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by path as given.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_time: f64,
    pub seed: Option<u64>,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            config,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time: 0.0,
            seed,
            status: "ok".into(),
        }
    }

    /// Hashes `path`, and its JSON sidecar when it is a raw stream.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let mut paths = vec![path.to_path_buf()];
        if path.extension().is_some_and(|e| e == "raw") {
            paths.push(path.with_extension("json"));
        }
        for p in paths {
            self.input_hashes.insert(p.display().to_string(), sha256_file(&p)?);
        }
        Ok(())
    }

    pub fn add_outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        for p in paths {
            if p.extension().is_some_and(|e| e == "raw") {
                self.outputs.push(p.with_extension("json").display().to_string());
            }
            self.outputs.push(p.display().to_string());
        }
    }

    /// Write-then-rename so a reader never sees a partial manifest.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(FILE_NAME);
        let tmp = dir.join(format!(".{FILE_NAME}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

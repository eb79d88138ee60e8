//! Run manifest: what produced the artifacts in a directory. No timestamps, so reruns diff clean.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// File name -> SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        let versions = ["sparsenn-core", "sparsenn-sim", "sparsenn-cli"]
            .into_iter()
            .map(|k| (k.to_string(), env!("CARGO_PKG_VERSION").to_string()))
            .collect();
        Manifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            versions,
            files: BTreeMap::new(),
        }
    }

    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.files.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `manifest_<command>.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

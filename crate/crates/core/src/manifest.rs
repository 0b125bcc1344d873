//! Run manifests and content hashing.
//!
//! A manifest id hashes only the manifest inputs (command, config, input
//! artifact hashes, seeds), never the wall clock, so rerunning a stage with
//! identical inputs yields byte-identical artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "unrest-manifest/1";
pub const REVISION: &str = concat!("unrest-", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hashes every file directly under `dir` in sorted name order, skipping the
/// sidecar `manifest.json` (it carries a wall-clock stamp).
pub fn hash_dir(dir: &Path) -> std::io::Result<String> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<Vec<_>, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    let mut h = Sha256::new();
    for e in entries {
        let p = e.path();
        if p.is_file() && e.file_name() != "manifest.json" {
            h.update(e.file_name().to_string_lossy().as_bytes());
            h.update(fs::read(&p)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    pub seeds: Vec<u64>,
    pub revision: String,
    /// Seconds since the Unix epoch; informational, excluded from the id.
    pub wall_clock: u64,
    pub id: String,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, inputs: Vec<ArtifactRef>, seeds: Vec<u64>) -> Self {
        let config_hash = sha256_hex(config_text.as_bytes());
        let mut m = Self {
            format: MANIFEST_FORMAT.to_string(),
            command: command.to_string(),
            config_hash,
            inputs,
            outputs: vec![],
            seeds,
            revision: REVISION.to_string(),
            wall_clock: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            id: String::new(),
        };
        m.id = m.compute_id();
        m
    }

    fn compute_id(&self) -> String {
        let key = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "revision": self.revision,
        });
        sha256_hex(key.to_string().as_bytes())[..16].to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_json())
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Self::from_json(&fs::read_to_string(path)?).map_err(std::io::Error::other)
    }
}

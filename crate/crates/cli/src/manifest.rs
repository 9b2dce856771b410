//! Run manifests: what produced a stage, with digests of every output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Seeds;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Configuration in effect, as TOML.
    pub config: String,
    pub seeds: Seeds,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    /// Digests of files read from earlier stages or outside the workspace.
    pub inputs: BTreeMap<String, String>,
    /// Digests of every file in the stage directory, by relative path.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &str, seeds: &Seeds) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.to_string(),
            seeds: seeds.clone(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_secs: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let digest = digest_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }

    /// Recomputes the digest of every listed output of the stage in `dir`.
    /// Missing, altered or unlisted files are errors.
    pub fn verify(dir: &Path) -> Result<Self> {
        let manifest = Self::load(dir)?;
        let mut problems = Vec::new();
        for (rel, expected) in &manifest.outputs {
            match digest_file(&dir.join(rel)) {
                Ok(d) if &d == expected => {}
                Ok(_) => problems.push(format!("{rel} was modified")),
                Err(_) => problems.push(format!("{rel} is missing")),
            }
        }
        for rel in crate::workspace::list_files(dir)? {
            if !manifest.outputs.contains_key(&rel) {
                problems.push(format!("{rel} is not part of the run"));
            }
        }
        if !problems.is_empty() {
            bail!("{}: {}", dir.display(), problems.join(", "));
        }
        Ok(manifest)
    }
}

/// Lowercase hex SHA-256 of a file.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

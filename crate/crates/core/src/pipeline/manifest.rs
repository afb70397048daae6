use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the run directory, with `/` separators.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub command: String,
    pub seed: Option<u64>,
    pub created_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub effective_config: serde_json::Value,
    /// Digest of the frozen model every command ran against.
    pub weights_digest: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config.digest()?,
            effective_config: config.shared_json()?,
            weights_digest: None,
            entries: Vec::new(),
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The manifest in `root`, or a fresh one. An existing manifest written
    /// under a different configuration is refused.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        if !root.join(MANIFEST_FILE).exists() {
            return Self::new(config);
        }
        let m = Self::load(root)?;
        let digest = config.digest()?;
        if m.config_digest != digest {
            return Err(Error::Config(format!(
                "{} holds a run with config digest {}, this config has {digest}; use another --out",
                root.display(),
                m.config_digest
            )));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    /// Hashes `root/rel` and records it, replacing an older entry for the
    /// same path.
    pub fn record(&mut self, root: &Path, rel: &str, command: &str, seed: Option<u64>) -> Result<()> {
        let path = root.join(rel);
        let bytes = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        let entry = ManifestEntry {
            path: rel.to_string(),
            sha256: sha256_file(&path)?,
            bytes,
            command: command.to_string(),
            seed,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        match self.entries.iter_mut().find(|e| e.path == rel) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    /// Fails unless every model load in this run saw the same weights.
    pub fn check_weights(&mut self, digest: &str) -> Result<()> {
        match &self.weights_digest {
            Some(d) if d != digest => Err(Error::Numeric(format!(
                "model weights changed within the run: manifest has {d}, loaded model has {digest}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.weights_digest = Some(digest.to_string());
                Ok(())
            }
        }
    }

    pub fn hashes(&self) -> BTreeMap<&str, &str> {
        self.entries
            .iter()
            .map(|e| (e.path.as_str(), e.sha256.as_str()))
            .collect()
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.entries.iter().any(|e| e.path == rel)
    }
}

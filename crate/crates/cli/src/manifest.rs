use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

/// Provenance of an output directory: the resolved config, its seeds, the
/// commands that wrote into the directory and a checksum per artifact.
///
/// Nothing time- or host-dependent goes in here, so reruns with the same
/// config produce the same bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seeds: serde_json::Value,
    pub commands: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Canonical JSON of the config; its hash identifies the run. The output
/// directory is blanked so that the same run written to two places hashes
/// the same.
pub fn config_json(cfg: &RunConfig) -> anyhow::Result<String> {
    let mut cfg = cfg.clone();
    cfg.out_dir = std::path::PathBuf::new();
    Ok(serde_json::to_string_pretty(&cfg)? + "\n")
}

impl Manifest {
    pub fn load(dir: &Path) -> anyhow::Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }

    /// Writes `config.json`, then records `command` and the checksums of
    /// `files` (relative to `dir`). A manifest left by a different config is
    /// replaced rather than merged.
    pub fn record(dir: &Path, cfg: &RunConfig, command: &str, files: &[&str]) -> anyhow::Result<Self> {
        let text = config_json(cfg)?;
        std::fs::write(dir.join("config.json"), &text)?;
        let hash = sha256_hex(text.as_bytes());
        let mut m = match Self::load(dir)? {
            Some(m) if m.config_sha256 == hash => m,
            _ => Self {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_sha256: hash,
                seeds: cfg.seeds(),
                ..Self::default()
            },
        };
        if !m.commands.iter().any(|c| c == command) {
            m.commands.push(command.to_string());
        }
        m.artifacts.insert("config.json".into(), sha256_hex(text.as_bytes()));
        for f in files {
            m.artifacts.insert(f.to_string(), file_sha256(&dir.join(f))?);
        }
        let out = serde_json::to_string_pretty(&m)? + "\n";
        std::fs::write(dir.join(MANIFEST), out)?;
        Ok(m)
    }

    /// Artifacts whose current bytes differ from the recorded checksum.
    pub fn verify(&self, dir: &Path) -> anyhow::Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, want) in &self.artifacts {
            let path = dir.join(name);
            if !path.exists() || file_sha256(&path)? != *want {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}

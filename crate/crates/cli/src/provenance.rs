//! Provenance records written next to every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// SHA-256 of every input file or directory, keyed by the path given.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub outcome: Value,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: config.clone(),
            seed,
            inputs: BTreeMap::new(),
            outcome: Value::Null,
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .insert(path.display().to_string(), hash_path(path)?);
        Ok(self)
    }

    pub fn outcome(mut self, value: Value) -> Self {
        self.outcome = value;
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory's sorted relative paths and contents.
/// `provenance.json` files inside a directory are skipped.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(fs::read(path.join(&rel)).with_context(|| format!("reading {rel}"))?);
        }
    } else {
        h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex(&h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != "provenance.json") {
            out.push(p.strip_prefix(root)?.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

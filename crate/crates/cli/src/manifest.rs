use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input path → SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    mdcdet_core::fsutil::write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    started: Instant,
    fixed_clock: bool,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, fixed_clock: bool) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            fixed_clock,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Writes `bytes` to `dir/name` and records it.
    pub fn output(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Records a file some other writer already produced.
    pub fn existing_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.outputs.insert(name.to_string(), hash_file(&dir.join(name))?);
        Ok(())
    }

    pub fn finish(self, dir: &Path, config: serde_json::Value, seed: u64) -> Result<RunManifest> {
        let wall_ms = if self.fixed_clock { 0 } else { self.started.elapsed().as_millis() as u64 };
        let manifest =
            RunManifest { command: self.command, config, seed, inputs: self.inputs, outputs: self.outputs, wall_ms };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(manifest_name(&manifest.command)), &bytes)?;
        Ok(manifest)
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

//! Run manifests: what was run, on which inputs, and what it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run.json";

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved arguments (config files already expanded), without the program name.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    /// Absolute input path -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

/// Hashes a file, or every file below a directory (keyed by full path).
pub fn hash_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = paths.to_vec();
    while let Some(p) = stack.pop() {
        let abs = std::fs::canonicalize(&p).with_context(|| format!("input {}", p.display()))?;
        if abs.is_dir() {
            for e in std::fs::read_dir(&abs)? {
                stack.push(e?.path());
            }
        } else {
            out.insert(abs.display().to_string(), hash_file(&abs)?);
        }
    }
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        csau::archive::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

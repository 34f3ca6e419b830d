//! Stage manifests. Each records the hashes of the files a stage read and
//! wrote, plus the hash of each upstream manifest it relied on, so a
//! changed artifact anywhere up the chain is caught before it is used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Hash of the configuration blocks the stage depends on.
    pub config_hash: String,
    /// Upstream stage name to the hash of its manifest file.
    pub upstream: BTreeMap<String, String>,
    /// Paths relative to the work directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn rel(work: &Path, p: &Path) -> String {
    p.strip_prefix(work).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn manifest_path(work: &Path, stage: &str) -> PathBuf {
    work.join(stage).join(MANIFEST_FILE)
}

pub fn load_manifest(work: &Path, stage: &str) -> Result<Manifest> {
    let p = manifest_path(work, stage);
    let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Checks that `files` are outputs of the `upstream` stages and still carry
/// the recorded hashes. Returns the input hash map and the upstream
/// manifest hashes for the new manifest.
pub fn verify_inputs(
    work: &Path,
    upstream: &[&str],
    files: &[PathBuf],
) -> Result<(BTreeMap<String, String>, BTreeMap<String, String>)> {
    let mut recorded = BTreeMap::new();
    let mut chain = BTreeMap::new();
    for &stage in upstream {
        let mp = manifest_path(work, stage);
        chain.insert(stage.to_string(), sha256_file(&mp)?);
        let m = load_manifest(work, stage)?;
        if m.stage != stage {
            return Err(PipelineError::Integrity { path: mp, expected: stage.into(), actual: m.stage });
        }
        recorded.extend(m.outputs);
    }
    let mut inputs = BTreeMap::new();
    for f in files {
        let key = rel(work, f);
        let actual = sha256_file(f)?;
        match recorded.get(&key) {
            Some(expected) if *expected == actual => {}
            Some(expected) => {
                return Err(PipelineError::Integrity { path: f.clone(), expected: expected.clone(), actual });
            }
            None => {
                return Err(PipelineError::Integrity { path: f.clone(), expected: "an upstream output".into(), actual: "unlisted file".into() });
            }
        }
        inputs.insert(key, actual);
    }
    Ok((inputs, chain))
}

/// Hashes `outputs` and writes the stage manifest.
pub fn write_manifest(
    work: &Path,
    stage: &str,
    config_hash: String,
    upstream: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: &[PathBuf],
) -> Result<Manifest> {
    let mut out = BTreeMap::new();
    for f in outputs {
        out.insert(rel(work, f), sha256_file(f)?);
    }
    let m = Manifest { stage: stage.to_string(), config_hash, upstream, inputs, outputs: out };
    let p = manifest_path(work, stage);
    let text = serde_json::to_string_pretty(&m)? + "\n";
    std::fs::write(&p, text).map_err(|e| PipelineError::io(&p, e))?;
    Ok(m)
}

/// Hash of any serializable configuration value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_bytes(serde_json::to_string(value).expect("config serializes").as_bytes())
}

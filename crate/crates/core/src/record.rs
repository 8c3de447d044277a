//! Run records: what was run, with which configuration and seeds, on which
//! input bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const RUN_RECORD_FILE: &str = "run_record.json";

/// SHA-256 over `blob <len>\0<bytes>`, the way git addresses blobs.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            walk(&e, out)?;
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Hashes every file under `paths` (directories recursively, sorted).
pub fn hash_inputs(paths: &[PathBuf]) -> Result<Vec<InputHash>> {
    let mut files = Vec::new();
    for p in paths {
        walk(p, &mut files)?;
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            Ok(InputHash {
                sha256: content_hash(&bytes),
                bytes: bytes.len() as u64,
                path: f,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub args: Vec<String>,
    /// Effective configuration after overrides.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputHash>,
    pub outputs: PathBuf,
    pub elapsed_seconds: f64,
}

impl RunRecord {
    pub fn new(subcommand: &str, config: serde_json::Value, outputs: &Path) -> Self {
        RunRecord {
            tool: "xmoda".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            args: std::env::args().collect(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: outputs.to_path_buf(),
            elapsed_seconds: 0.0,
        }
    }

    /// Writes `run_record.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RUN_RECORD_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_blob_id_scheme() {
        // sha256 of "blob 0\0"
        assert_eq!(content_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }
}

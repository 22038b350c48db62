//! Run metadata written next to every subcommand's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use alt_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    /// Absent when the file could not be read; the run then fails on it.
    pub sha256: Option<String>,
}

#[derive(Serialize)]
pub struct RunMeta<'a> {
    pub subcommand: &'a str,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: u64,
    pub workers: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn hash_inputs(paths: &[PathBuf]) -> Vec<InputHash> {
    paths
        .iter()
        .map(|p| InputHash {
            path: p.clone(),
            sha256: sha256_file(p).ok(),
        })
        .collect()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write(out: &Path, meta: &RunMeta) -> Result<()> {
    ensure_dir(out)?;
    let path = out.join(format!("{}.run.json", meta.subcommand));
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

//! Atomic file output and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
/// Overrides the output directory named in the config.
pub const OUT_DIR_ENV: &str = "NMRL_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Some analyses were rejected; their outputs are missing.
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub status: RunStatus,
    /// One message per rejected analysis.
    pub rejections: Vec<Rejection>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub analysis: String,
    pub message: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `dir/rel` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, rel: &str, bytes: &[u8]) -> CliResult<FileEntry> {
    let path = dir.join(rel);
    let parent = path.parent().unwrap_or(dir).to_path_buf();
    std::fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| CliError::io(&parent, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(&path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(&path, e))?;
    tmp.persist(&path).map_err(|e| CliError::io(&path, e.error))?;
    Ok(FileEntry {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    })
}

pub fn write_json(dir: &Path, rel: &str, v: &impl Serialize) -> CliResult<FileEntry> {
    let mut text = serde_json::to_string_pretty(v).map_err(nmrl::Error::from)?;
    text.push('\n');
    write_atomic(dir, rel, text.as_bytes())
}

impl Manifest {
    pub fn read(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Integrity {
            path: MANIFEST.into(),
            msg: e.to_string(),
        })
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, run_dir: &Path) -> CliResult<()> {
        for f in &self.files {
            let path = run_dir.join(&f.path);
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let got = sha256_hex(&bytes);
            if got != f.sha256 {
                return Err(CliError::Integrity {
                    path: f.path.clone(),
                    msg: format!("sha256 {got} differs from the manifest's {}", f.sha256),
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, rel: &str) -> bool {
        self.files.iter().any(|f| f.path == rel)
    }
}

/// Resolves the output directory: flag, then environment, then config.
pub fn resolve_out_dir(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or(from_config)
        .ok_or_else(|| CliError::config("/out", format!("no output directory: pass --out, set {OUT_DIR_ENV} or give \"out\"")))
}

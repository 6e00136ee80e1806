//! Result files, run manifests, and input digests.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::failure::Failure;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce one invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Resolved configuration after flags, config file and defaults are merged.
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_seconds: f64,
}

/// Result files staged in memory, written only once the command has succeeded.
pub struct Staged {
    command: String,
    started: Instant,
    inputs: Vec<InputDigest>,
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    pub fn new(command: &str) -> Self {
        Staged { command: command.to_string(), started: Instant::now(), inputs: Vec::new(), files: Vec::new() }
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn file(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((path.to_path_buf(), bytes));
    }

    /// Pretty JSON with a trailing newline.
    pub fn json(&mut self, path: &Path, value: &Value) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.file(path, bytes);
        Ok(())
    }

    /// Writes every staged file and then the manifest, each through a temporary file and a rename.
    pub fn commit(mut self, manifest_path: &Path, config: Value, seeds: Value) -> Result<(), Failure> {
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds,
            inputs: std::mem::take(&mut self.inputs),
            outputs: self.files.iter().map(|(p, _)| p.display().to_string()).collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
        manifest_bytes.push(b'\n');
        self.files.push((manifest_path.to_path_buf(), manifest_bytes));
        for (path, bytes) in &self.files {
            write_atomic(path, bytes)?;
        }
        Ok(())
    }
}

/// `out` with its extension replaced by `manifest.json`.
pub fn default_manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// File name of `path`, as stored in results that point at their manifest.
pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let context = |e: std::io::Error| Failure::Validation(format!("cannot write {}: {e}", path.display()));
    let mut tmp = NamedTempFile::new_in(dir).map_err(context)?;
    tmp.write_all(bytes).map_err(context)?;
    tmp.as_file().sync_all().map_err(context)?;
    tmp.persist(path).map_err(|e| context(e.error))?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let mut file = File::open(path).map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

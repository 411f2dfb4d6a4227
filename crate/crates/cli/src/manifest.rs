//! Run manifests: the command line, every resolved setting with its
//! origin, and checksums of the files read and written.

use std::fs;
use std::path::{Path, PathBuf};

use npi_core::config::{Resolved, Resolver};
use npi_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name; `npi replay` re-runs them.
    pub args: Vec<String>,
    pub config: Vec<Resolved>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests a file, or every file below a directory in sorted order.
fn digest_all(path: &Path) -> Result<Vec<FileDigest>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
            .collect();
        entries.sort();
        let mut out = Vec::new();
        for e in entries {
            out.extend(digest_all(&e)?);
        }
        Ok(out)
    } else {
        Ok(vec![FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        }])
    }
}

/// Collects the pieces of a manifest while a command runs.
pub struct Recorder {
    command: String,
    args: Vec<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn finish(self, resolver: &Resolver, path: &Path) -> Result<Manifest> {
        let collect = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            let mut out = Vec::new();
            for p in paths {
                out.extend(digest_all(p)?);
            }
            Ok(out)
        };
        let manifest = Manifest {
            tool: "npi".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            args: self.args,
            config: resolver.resolved().to_vec(),
            inputs: collect(&self.inputs)?,
            outputs: collect(&self.outputs)?,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(manifest)
    }
}

pub fn load(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Default manifest location: `manifest.json` inside a directory output,
/// `<file>.manifest.json` next to a file output.
pub fn default_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

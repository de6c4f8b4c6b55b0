use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the run root when the file lives under it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Wall-clock times; the only part of a manifest that differs between reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Subcommand options that are not part of [`RunConfig`].
    pub options: serde_json::Value,
    pub inputs: Vec<FileRef>,
    pub artifacts: Vec<FileRef>,
    pub timestamps: Timestamps,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((format!("{:x}", Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn file_ref(path: &Path, root: &Path) -> Result<FileRef> {
    let (sha256, bytes) = sha256_file(path)?;
    let shown = path.strip_prefix(root).unwrap_or(path);
    Ok(FileRef {
        path: shown.to_string_lossy().replace('\\', "/"),
        sha256,
        bytes,
    })
}

/// Collects what one run read and wrote, then writes `manifest.json` into
/// its output directory.
pub struct Recorder {
    pub command: String,
    pub out: PathBuf,
    pub root: PathBuf,
    pub options: serde_json::Value,
    started: u128,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, out: &Path, root: &Path, options: serde_json::Value) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command: command.to_string(),
            out: out.to_path_buf(),
            root: root.to_path_buf(),
            options,
            started: now_ms(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Path of an artifact in the output directory, registered for the manifest.
    pub fn artifact(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.artifacts.push(p.clone());
        p
    }

    pub fn finish(self, config: &RunConfig) -> Result<RunManifest> {
        let refs = |ps: &[PathBuf]| {
            ps.iter()
                .map(|p| file_ref(p, &self.root))
                .collect::<Result<Vec<_>>>()
        };
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            options: self.options.clone(),
            inputs: refs(&self.inputs)?,
            artifacts: refs(&self.artifacts)?,
            timestamps: Timestamps {
                started_unix_ms: self.started,
                finished_unix_ms: now_ms(),
            },
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

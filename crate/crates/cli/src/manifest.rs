use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Wall-clock time; the only field that varies between identical runs.
    pub duration_ms: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {} for its checksum", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of a file, or of every file directly inside a directory
/// except the run manifest itself, in name order.
fn digests(path: &Path) -> Result<Vec<FileDigest>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != RUN_FILE));
        files.sort();
        files.iter().map(|p| digest(p)).collect()
    } else {
        Ok(vec![digest(path)?])
    }
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

pub struct RunRecorder {
    subcommand: &'static str,
    seed: u64,
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: serde_json::Value,
}

impl RunRecorder {
    pub fn new(subcommand: &'static str, seed: u64) -> Self {
        Self {
            subcommand,
            seed,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn config<C: Serialize>(&mut self, config: &C) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    /// Writes the manifest to `explicit`, else next to the first output
    /// (`DIR/run.json` or `FILE.run.json`). Runs that only print to
    /// standard output log the manifest instead.
    pub fn finish(self, explicit: Option<&Path>) -> Result<RunManifest> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            inputs.extend(digests(p)?);
        }
        let mut outputs = Vec::new();
        for p in &self.outputs {
            outputs.extend(digests(p)?);
        }
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            config: self.config,
            inputs,
            outputs,
            duration_ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        let target = explicit.map(Path::to_path_buf).or_else(|| {
            self.outputs.first().map(|p| {
                if p.is_dir() {
                    p.join(RUN_FILE)
                } else {
                    let mut name = p.as_os_str().to_owned();
                    name.push(".run.json");
                    PathBuf::from(name)
                }
            })
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        match target {
            Some(path) => fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
            None => log::info!("run manifest: {}", serde_json::to_string(&manifest)?),
        }
        Ok(manifest)
    }
}

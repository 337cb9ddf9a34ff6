//! Run manifest written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use feasflow_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct Input {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    feasflow: &'static str,
    checkpoint_format: u32,
}

#[derive(Debug, Serialize, Default)]
struct Timings {
    total_seconds: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    epoch_seconds: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    command: &'static str,
    argv: Vec<String>,
    seed: u64,
    threads: usize,
    config: serde_json::Value,
    inputs: Vec<Input>,
    outputs: Vec<String>,
    versions: Versions,
    /// The only fields that differ between identical reruns.
    created_unix: u64,
    timings: Timings,
    #[serde(skip)]
    started: Option<Instant>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            seed,
            threads: rayon::current_num_threads(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                feasflow: env!("CARGO_PKG_VERSION"),
                checkpoint_format: feasflow_core::checkpoint::VERSION,
            },
            created_unix: 0,
            timings: Timings::default(),
            started: Some(Instant::now()),
        }
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config).map_err(|e| Error::Data(format!("config: {e}")))?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_hex(path)?;
        self.inputs.push(Input {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn epoch_seconds(&mut self, seconds: Vec<f64>) {
        self.timings.epoch_seconds = seconds;
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.timings.total_seconds = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        self.created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// One run's record: what ran, on which inputs, producing what.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub started_at: String,
    pub wall_time_secs: f64,
    pub version: &'static str,
    pub status: String,
}

/// Collects inputs and outputs while a command runs.
pub struct Run {
    started: Instant,
    started_at: DateTime<Utc>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start() -> Self {
        Run {
            started: Instant::now(),
            started_at: Utc::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records `path` with its SHA-256.
    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(self, command: &str, argv: Vec<String>, config: Value, seed: u64, status: String) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            argv,
            config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed,
            started_at: self.started_at.to_rfc3339_opts(SecondsFormat::Millis, true),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION"),
            status,
        }
    }
}

impl RunManifest {
    /// Appends this manifest as one line of `path`.
    pub fn append_to(&self, path: &Path) -> io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(self).map_err(io::Error::other)?;
        writeln!(f, "{line}")
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

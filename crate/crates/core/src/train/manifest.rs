//! Append-only JSON-lines run log.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Start {
        seed: u64,
        rng: String,
        code_version: String,
        start_iter: u64,
        resumed_from: Option<PathBuf>,
        config: TrainConfig,
    },
    /// Means over the `eval_every` iterations ending at `iter`.
    Eval { iter: u64, lr: f64, loss: f64, psnr_db: f64 },
    Checkpoint { iter: u64, path: PathBuf },
    End { iter: u64, final_checkpoint: PathBuf },
}

/// Handle to a manifest file; every record is appended as one line.
#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
}

impl Manifest {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Manifest { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<S: Serialize>(&self, record: &S) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| Error::Config(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }

    /// Parse every line as a training event.
    pub fn read_events(&self) -> Result<Vec<TrainEvent>> {
        let f = std::fs::File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&self.path, e))?;
            let ev = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: self.path.clone(),
                msg: format!("line {}: {e}", n + 1),
            })?;
            out.push(ev);
        }
        Ok(out)
    }
}

//! Run manifests: every command writes one next to its artifact, recording
//! the exact config, seed, content hashes of the files it read and wrote,
//! and wall time. Two runs with identical inputs and seed produce manifests
//! that differ only in the two timing fields.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Workspace};
use seqrec::error::{Error, Result};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Subcommand plus the flags that shaped it, e.g. "train --stage 2".
    pub command: String,
    pub seed: u64,
    /// Wall-clock start, milliseconds since the Unix epoch. Varies run to
    /// run; everything else in the manifest is deterministic.
    pub started_unix_ms: u64,
    pub wall_time_s: f64,
    pub config: RunConfig,
    /// Content hash of every file the command read, keyed by its path
    /// relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    /// Content hash of every file the command wrote.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific summary (selection stats, final losses, metrics…).
    pub details: serde_json::Value,
}

/// Accumulates hashes while a command runs, then writes the manifest.
pub struct ManifestBuilder {
    manifest: RunManifest,
    t0: Instant,
}

impl ManifestBuilder {
    pub fn new(command: impl Into<String>, config: &RunConfig) -> Self {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        ManifestBuilder {
            manifest: RunManifest {
                command: command.into(),
                seed: config.seed,
                started_unix_ms,
                wall_time_s: 0.0,
                config: config.clone(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                details: serde_json::Value::Null,
            },
            t0: Instant::now(),
        }
    }

    /// Record a file the command is about to consume.
    pub fn input(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.manifest.inputs.insert(ws.label(path), hash);
        Ok(())
    }

    /// Record a file the command just wrote.
    pub fn output(&mut self, ws: &Workspace, path: &Path) -> Result<()> {
        let hash = hash_file(path)?;
        self.manifest.outputs.insert(ws.label(path), hash);
        Ok(())
    }

    pub fn details(&mut self, details: serde_json::Value) {
        self.manifest.details = details;
    }

    /// Stamp the elapsed time and write the manifest itself.
    pub fn write(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_time_s = self.t0.elapsed().as_secs_f64();
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, &self.manifest)?;
        use std::io::Write;
        writeln!(writer)?;
        Ok(())
    }
}

/// Content hash of a file, in the same spirit as a version-control blob id.
pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot hash {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(7 + digest.len() * 2);
    hex.push_str("sha256:");
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

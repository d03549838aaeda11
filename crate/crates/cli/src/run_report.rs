//! Machine-readable record of one command run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use svchange::io::{sha256_file, write_json_pretty};
use svchange::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_digest: String,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub rows: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

/// Collects report fields while a command runs.
pub struct Recorder {
    command: String,
    config_digest: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    rows: BTreeMap<String, u64>,
    warnings: Vec<String>,
}

impl Recorder {
    pub fn new(command: &str, config_digest: String) -> Self {
        Self {
            command: command.to_owned(),
            config_digest,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            rows: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Hashes an input file; call before reading it.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn rows(&mut self, key: &str, n: usize) {
        self.rows.insert(key.to_owned(), n as u64);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.warnings.push(message);
    }

    pub fn finish(self, error: Option<String>) -> RunReport {
        let outputs = self
            .outputs
            .iter()
            .filter_map(|p| Some((p.display().to_string(), sha256_file(p).ok()?)))
            .collect();
        RunReport {
            command: self.command,
            status: if error.is_none() { "ok" } else { "error" }.to_owned(),
            error,
            config_digest: self.config_digest,
            inputs: self.inputs,
            outputs,
            rows: self.rows,
            warnings: self.warnings,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        }
    }
}

pub fn report_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join("reports").join(format!("{command}.json"))
}

pub fn write_report(out_dir: &Path, report: &RunReport) -> Result<PathBuf> {
    let path = report_path(out_dir, &report.command);
    let dir = path.parent().expect("report path has a parent");
    std::fs::create_dir_all(dir).map_err(|e| svchange::Error::io(dir, e))?;
    write_json_pretty(&path, report)?;
    Ok(path)
}

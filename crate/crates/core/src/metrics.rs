//! Metrics as JSON lines: one `{step, metric, value, config_hash, seed}`
//! object per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Appends records to `<dir>/metrics.jsonl`; every write is flushed.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
    config_hash: String,
    seed: u64,
}

impl MetricsWriter {
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("metrics.jsonl");
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(MetricsWriter {
            path,
            file,
            config_hash: config_hash.to_string(),
            seed,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, step: u64, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            step,
            metric: metric.to_string(),
            value,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Metric(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Metric(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Drops records of `metrics` at steps above `step`, so a resumed run can
/// rewrite them. Other metrics are kept.
pub fn truncate_after(path: &Path, step: u64, metrics: &[&str]) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    // Kept lines are copied verbatim: re-serializing parsed floats is not
    // guaranteed to reproduce the same text.
    let mut text = String::new();
    for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricRecord = serde_json::from_str(line).map_err(|e| Error::Metric(format!("line {}: {e}", i + 1)))?;
        if r.step <= step || !metrics.contains(&r.metric.as_str()) {
            text.push_str(line);
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

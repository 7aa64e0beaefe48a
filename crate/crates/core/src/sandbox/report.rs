//! Report envelope, JSON canon and CSV output.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scenario: Scenario,
    pub seed: u64,
    pub code_version: String,
    /// Deviation constant used by bounds and certificates in this run.
    pub c_universal: f64,
    /// Wall-clock time of the run; not part of the canonical form.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: u32,
    pub experiment: String,
    pub metadata: Metadata,
    pub result: T,
}

fn now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

impl<T: Serialize> Report<T> {
    pub fn new(experiment: &str, scenario: &Scenario, c_universal: f64, result: T) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: experiment.to_string(),
            metadata: Metadata {
                scenario: scenario.clone(),
                seed: scenario.seed,
                code_version: CODE_VERSION.to_string(),
                c_universal,
                timestamp: now(),
            },
            result,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the timestamp removed; equal for equal (scenario, seed).
    pub fn canonical(&self) -> String {
        canonical_json(&self.to_json()).expect("own JSON parses")
    }
}

/// Drops `metadata.timestamp` and re-serializes.
pub fn canonical_json(text: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(m) = v.get_mut("metadata").and_then(|m| m.as_object_mut()) {
        m.remove("timestamp");
    }
    Ok(serde_json::to_string_pretty(&v).expect("value serializes"))
}

/// Fixed-column table form of a result.
pub trait CsvTable {
    fn header(&self) -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

pub fn fmt(x: f64) -> String {
    format!("{x:e}")
}

pub fn write_csv(path: &Path, table: &dyn CsvTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(table.header()).map_err(|e| Error::Io(e.to_string()))?;
    for row in table.rows() {
        w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<out>/<stem>.json` and, if asked, `<out>/<stem>.csv`.
pub fn write_outputs<T: Serialize + CsvTable>(report: &Report<T>, out: &Path, stem: &str, csv: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let json_path = out.join(format!("{stem}.json"));
    let mut f = std::fs::File::create(&json_path)?;
    f.write_all(report.to_json().as_bytes())?;
    f.write_all(b"\n")?;
    let mut written = vec![json_path];
    if csv {
        let csv_path = out.join(format!("{stem}.csv"));
        write_csv(&csv_path, &report.result)?;
        written.push(csv_path);
    }
    Ok(written)
}

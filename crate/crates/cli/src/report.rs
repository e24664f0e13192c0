use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.txt";

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Observations processed; sample touches for batch methods.
    pub checkpoint: usize,
    pub method: String,
    pub p: Option<usize>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub kl: Option<f64>,
    pub stderr: Option<f64>,
    /// Mean wall time per observation so far, when timing is enabled.
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<String>,
}

impl RunReport {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            rows: Vec::new(),
            summary: Vec::new(),
        }
    }

    /// Rows of one method, optionally restricted to a rank and sample count.
    pub fn trajectory<'a>(
        &'a self,
        method: &'a str,
        p: Option<usize>,
        k: Option<usize>,
    ) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.method == method && (p.is_none() || r.p == p) && (k.is_none() || r.k == k))
    }

    /// Last KL value of a trajectory.
    pub fn final_kl(&self, method: &str, p: Option<usize>, k: Option<usize>) -> Option<f64> {
        self.trajectory(method, p, k).filter_map(|r| r.kl).last()
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    if rows.is_empty() {
        writer
            .write_record(["checkpoint", "method", "p", "K", "kl", "stderr", "wall_ms"])
            .map_err(|e| CliError::io(path, e))?;
    }
    for row in rows {
        writer.serialize(row).map_err(|e| CliError::io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| CliError::io(path, e))
}

/// Writes `results.csv`, `config.json` and `summary.txt` into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_results(&dir.join(RESULTS_FILE), &report.rows)?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, report.config.to_json()).map_err(|e| CliError::io(&config_path, e))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let mut summary = report.summary.join("\n");
    summary.push('\n');
    fs::write(&summary_path, summary).map_err(|e| CliError::io(&summary_path, e))
}

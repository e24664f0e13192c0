//! Experiment harness for the `lrvga` filters: configuration, runners and
//! report files.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

use std::time::Instant;

pub use config::{ConfigOverrides, ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
pub use experiments::run_experiment;
pub use report::{emit_report, ResultRow, RunReport};

/// Runs the configured experiment and writes its report to `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let mut report = run_experiment(cfg)?;
    report
        .summary
        .push(format!("wall time: {:.3} s", start.elapsed().as_secs_f64()));
    emit_report(&report, &cfg.out)?;
    Ok(report)
}

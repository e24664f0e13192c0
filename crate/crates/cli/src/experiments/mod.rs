//! Experiment runners. Every runner streams its data once, updating all
//! cells of the sweep in lockstep, and scores them at shared checkpoints.

mod covariance;
mod linear;
mod logistic;
mod nonlinear;

use std::time::{Duration, Instant};

use lrvga::data::{
    gen_regression_inputs, label_rng, normalize_stream, parse_libsvm, LibsvmOptions,
    NormalizeMode, RegressionSpec,
};
use lrvga::{Observation, Result as CoreResult};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};
use crate::report::RunReport;

pub use covariance::{covariance_kl, run_covariance_experiment};
pub use linear::run_linear_experiment;
pub use logistic::run_logistic_experiment;
pub use nonlinear::{expectation_table, run_nonlinear_ablation, ExpectationTable};

/// Dispatches on the experiment kind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::Cov => run_covariance_experiment(cfg),
        ExperimentKind::Linear => run_linear_experiment(cfg),
        ExperimentKind::Logistic => run_logistic_experiment(cfg),
        ExperimentKind::Nonlinear => run_nonlinear_ablation(cfg),
    }
}

/// `min(count, n)` distinct, log-spaced steps in `[1, n]`, ending at `n`.
pub fn log_spaced_checkpoints(n: usize, count: usize) -> Vec<usize> {
    let m = count.min(n);
    if m == 0 {
        return Vec::new();
    }
    if m == 1 {
        return vec![n];
    }
    let ln_n = (n as f64).ln();
    let mut out: Vec<usize> = (0..m)
        .map(|i| (ln_n * i as f64 / (m - 1) as f64).exp().round() as usize)
        .collect();
    // Spread out duplicates at the low end, then pull back from n.
    for i in 1..m {
        out[i] = out[i].max(out[i - 1] + 1);
    }
    out[m - 1] = n;
    for i in (0..m - 1).rev() {
        out[i] = out[i].min(out[i + 1] - 1);
    }
    out
}

/// Independent generator for a named cell of a sweep.
pub fn cell_rng(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a keeps stream ids stable across platforms and toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Bytes held by a belief plus `k` sample columns: `8 d (p + k + 2)`.
pub fn aux_memory_estimate(d: usize, p: usize, k: usize) -> usize {
    8 * d * (p + k + 2)
}

/// Accumulated update time of one cell.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Stopwatch {
    total: Duration,
}

impl Stopwatch {
    pub fn time<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.total += start.elapsed();
        out
    }

    /// Mean milliseconds per step after `steps` steps, if timing is on.
    pub fn per_step_ms(&self, steps: usize, enabled: bool) -> Option<f64> {
        (enabled && steps > 0).then(|| self.total.as_secs_f64() * 1e3 / steps as f64)
    }
}

/// Labeled observation stream of a regression-type experiment.
pub(crate) struct RegressionData {
    pub dim: usize,
    /// Number of observations the stream yields.
    pub len: usize,
    pub stream: Box<dyn Iterator<Item = CoreResult<Observation>>>,
    pub theta_star: Option<DVector<f64>>,
    pub notes: Vec<String>,
}

/// Synthetic inputs with linear or logistic labels, or the configured dataset.
pub(crate) fn regression_data(
    cfg: &ExperimentConfig,
    sigma0: f64,
    logistic: bool,
) -> Result<RegressionData> {
    if let Some(path) = &cfg.dataset {
        let data = parse_libsvm(
            path,
            LibsvmOptions {
                binary_labels: logistic,
                dim: None,
            },
        )?;
        let dim = data.dim;
        check_rank(cfg, dim)?;
        let take = cfg.n.min(data.observations.len());
        let stream = normalize_stream(
            data.observations.into_iter().take(take),
            NormalizeMode::default(),
        )?;
        let notes = vec![
            format!("dataset: {} ({take} observations, d = {dim})", path.display()),
            format!("input scale factor: {}", stream.scale()),
        ];
        return Ok(RegressionData {
            dim,
            len: take,
            stream: Box::new(stream.map(Ok)),
            theta_star: None,
            notes,
        });
    }
    let spec = RegressionSpec {
        c: cfg.c,
        ..RegressionSpec::new(cfg.d, cfg.n, sigma0, cfg.seed)
    };
    let theta = spec.theta_star()?;
    let inputs = gen_regression_inputs(&spec)?;
    let stream: Box<dyn Iterator<Item = CoreResult<Observation>>> = if logistic {
        Box::new(lrvga::data::gen_logistic_labels(
            inputs,
            theta.clone(),
            label_rng(&spec),
        ))
    } else {
        Box::new(lrvga::data::gen_linear_labels(
            inputs,
            theta.clone(),
            Some(label_rng(&spec)),
        ))
    };
    Ok(RegressionData {
        dim: cfg.d,
        len: cfg.n,
        stream,
        theta_star: Some(theta),
        notes: vec![format!("synthetic inputs: d = {}, c = {}", cfg.d, cfg.c)],
    })
}

pub(crate) fn check_rank(cfg: &ExperimentConfig, dim: usize) -> Result<()> {
    if cfg.p.iter().any(|&p| p > dim) {
        return Err(CliError::Config(format!(
            "latent rank exceeds the data dimension {dim}"
        )));
    }
    Ok(())
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

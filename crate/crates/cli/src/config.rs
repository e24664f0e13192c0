use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lrvga::fa::{default_inner_loops, DEFAULT_INIT_EPS};
use lrvga::filters::Scheme;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Largest dimension for which dense baselines and exact KL are computed.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Cov,
    Linear,
    Logistic,
    Nonlinear,
}

impl FromStr for ExperimentKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cov" | "covariance" => Ok(Self::Cov),
            "linear" => Ok(Self::Linear),
            "logistic" => Ok(Self::Logistic),
            "nonlinear" | "nonlinear-logistic" => Ok(Self::Nonlinear),
            other => Err(CliError::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cov => "cov",
            Self::Linear => "linear",
            Self::Logistic => "logistic",
            Self::Nonlinear => "nonlinear",
        })
    }
}

/// Fully resolved run configuration; serialized verbatim to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub d: usize,
    /// Latent ranks swept by the run.
    pub p: Vec<usize>,
    pub n: usize,
    /// GGN sample count; `None` uses the cell's gradient sample count.
    pub k_hess: Option<usize>,
    /// Gradient sample counts swept by the nonlinear ablation.
    pub k_grad: Vec<usize>,
    pub inner_loops: usize,
    /// Prior scales; empty in covariance runs, where the scale is estimated.
    pub sigma0: Vec<f64>,
    pub eps_init: f64,
    pub c: f64,
    pub seed: u64,
    pub scheme: String,
    pub fresh_samples: bool,
    pub dataset: Option<PathBuf>,
    pub p_true: usize,
    pub checkpoints: usize,
    pub methods: Vec<String>,
    pub mc_samples: usize,
    pub batch_passes: usize,
    /// Fill the `wall_ms` column; off by default so reruns are byte-identical.
    pub timing: bool,
    pub out: PathBuf,
}

/// Every field optional, for layering a JSON file and command-line flags
/// over the per-experiment defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub experiment: Option<ExperimentKind>,
    pub d: Option<usize>,
    pub p: Option<Vec<usize>>,
    pub n: Option<usize>,
    pub k_hess: Option<usize>,
    pub k_grad: Option<Vec<usize>>,
    pub inner_loops: Option<usize>,
    pub sigma0: Option<Vec<f64>>,
    pub eps_init: Option<f64>,
    pub c: Option<f64>,
    pub seed: Option<u64>,
    pub scheme: Option<String>,
    pub fresh_samples: Option<bool>,
    pub dataset: Option<PathBuf>,
    pub p_true: Option<usize>,
    pub checkpoints: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub mc_samples: Option<usize>,
    pub batch_passes: Option<usize>,
    pub timing: Option<bool>,
    pub out: Option<PathBuf>,
}

impl ConfigOverrides {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn merge(self, other: Self) -> Self {
        macro_rules! pick {
            ($($f:ident),*) => {
                Self { $($f: other.$f.or(self.$f)),* }
            };
        }
        pick!(
            experiment, d, p, n, k_hess, k_grad, inner_loops, sigma0, eps_init, c, seed, scheme,
            fresh_samples, dataset, p_true, checkpoints, methods, mc_samples, batch_passes, timing,
            out
        )
    }
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let (d, p, n, sigma0, methods): (usize, Vec<usize>, usize, Vec<f64>, Vec<&str>) =
            match kind {
                ExperimentKind::Cov => (
                    100,
                    vec![5],
                    2000,
                    vec![],
                    vec!["recursive-em", "online-em", "batch-em"],
                ),
                ExperimentKind::Linear => (50, vec![1, 5, 10], 2000, vec![1.0], vec!["lrvga", "kalman"]),
                ExperimentKind::Logistic => (20, vec![5], 1000, vec![4.0], vec!["lrvga", "laplace"]),
                ExperimentKind::Nonlinear => (
                    20,
                    vec![10],
                    1000,
                    vec![1.0, 2.0, 3.0],
                    vec!["closed-form", "sampled"],
                ),
            };
        Self {
            experiment: kind,
            d,
            p,
            n,
            k_hess: None,
            k_grad: vec![1, 10, 100],
            inner_loops: default_inner_loops(d),
            sigma0,
            eps_init: DEFAULT_INIT_EPS,
            c: 1.0,
            seed: 0,
            scheme: Scheme::default().to_string(),
            fresh_samples: true,
            dataset: None,
            p_true: 5,
            checkpoints: 50,
            methods: methods.into_iter().map(String::from).collect(),
            mc_samples: 1000,
            batch_passes: 5,
            timing: false,
            out: PathBuf::from("results"),
        }
    }

    /// Defaults for the chosen experiment with the overrides applied; the
    /// inner-loop default follows the final `d`.
    pub fn resolve(ov: ConfigOverrides) -> Result<Self> {
        let kind = ov
            .experiment
            .ok_or_else(|| CliError::Config("--experiment is required".into()))?;
        let mut cfg = Self::defaults(kind);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = ov.$f { cfg.$f = v; })* };
        }
        if ov.k_hess.is_some() {
            cfg.k_hess = ov.k_hess;
        }
        if ov.dataset.is_some() {
            cfg.dataset = ov.dataset;
        }
        set!(d, p, n, k_grad, sigma0, eps_init, c, seed, scheme, fresh_samples, p_true,
             checkpoints, methods, mc_samples, batch_passes, timing, out);
        cfg.inner_loops = ov.inner_loops.unwrap_or_else(|| default_inner_loops(cfg.d));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme
            .parse()
            .map_err(|e: lrvga::LrvgaError| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.d == 0 || self.n == 0 {
            return fail("d and n must be positive".into());
        }
        if self.p.is_empty() || self.p.iter().any(|&p| p == 0 || p > self.d) {
            return fail(format!("every p must satisfy 1 <= p <= d = {}", self.d));
        }
        if self.inner_loops == 0 || self.checkpoints == 0 || self.mc_samples < 2 {
            return fail("inner_loops and checkpoints must be positive, mc_samples >= 2".into());
        }
        if self.k_hess == Some(0) || self.k_grad.iter().any(|&k| k == 0) {
            return fail("sample counts must be positive".into());
        }
        if !(self.eps_init > 0.0 && self.eps_init < 1.0) {
            return fail(format!("eps_init must lie in (0, 1), got {}", self.eps_init));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return fail(format!("c must be >= 0, got {}", self.c));
        }
        if self.sigma0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return fail("every sigma0 must be positive".into());
        }
        if self.c != 0.0 && self.d > DENSE_LIMIT && self.dataset.is_none() {
            return fail(format!(
                "a rotated input covariance needs a d x d matrix; use c = 0 above d = {DENSE_LIMIT}"
            ));
        }
        let scheme = self.scheme()?;
        let allowed: &[&str] = match self.experiment {
            ExperimentKind::Cov => &["recursive-em", "online-em", "batch-em"],
            ExperimentKind::Linear => &["lrvga", "kalman"],
            ExperimentKind::Logistic => &["lrvga", "laplace"],
            ExperimentKind::Nonlinear => &["closed-form", "sampled"],
        };
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if let Some(m) = self.methods.iter().find(|m| !allowed.contains(&m.as_str())) {
            return fail(format!(
                "method `{m}` is not available for {}; choose from {allowed:?}",
                self.experiment
            ));
        }
        match self.experiment {
            ExperimentKind::Cov => {
                if self.p_true == 0 || self.p_true > self.d {
                    return fail("p_true must satisfy 1 <= p_true <= d".into());
                }
                if self.d > DENSE_LIMIT {
                    return fail(format!("covariance runs evaluate a dense KL; d <= {DENSE_LIMIT}"));
                }
            }
            ExperimentKind::Linear | ExperimentKind::Logistic => {
                if self.sigma0.len() != 1 {
                    return fail("linear and logistic runs take exactly one sigma0".into());
                }
            }
            ExperimentKind::Nonlinear => {
                if self.sigma0.is_empty() || self.k_grad.is_empty() {
                    return fail("the ablation needs sigma0 and k_grad lists".into());
                }
            }
        }
        if self.experiment != ExperimentKind::Nonlinear && scheme != Scheme::default() {
            return fail(format!(
                "scheme {scheme} only applies to the nonlinear experiment"
            ));
        }
        if self.dataset.is_some() && self.experiment == ExperimentKind::Nonlinear {
            return fail("the nonlinear ablation runs on synthetic data only".into());
        }
        if self.experiment == ExperimentKind::Logistic
            && self.d > DENSE_LIMIT
            && self.methods.iter().any(|m| m == "laplace")
        {
            return fail(format!("the Laplace baseline is dense; d <= {DENSE_LIMIT}"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

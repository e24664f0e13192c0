use lrvga::eval::{
    laplace_logistic, logposterior_logistic, mc_kl_dense_to_posterior, mc_kl_to_posterior,
    KlEstimate,
};
use lrvga::filters::lrvga_logistic_step;
use lrvga::{DenseGaussian, GaussianBelief, Observation, Result as CoreResult};
use nalgebra::DVector;

use super::{
    aux_memory_estimate, cell_rng, check_rank, fmt_opt, log_spaced_checkpoints,
    regression_data, Stopwatch,
};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::report::{ResultRow, RunReport};

/// Gradient tolerance per observation; Newton stalls at round-off near `1e-8 t`.
const LAPLACE_TOL: f64 = 1e-8;
const LAPLACE_MAX_ITER: usize = 100;

/// Unnormalized MC KL of `belief` to the posterior given `data`. All methods
/// scored at checkpoint `t` share one random stream.
pub(crate) fn mc_kl(
    belief: &GaussianBelief,
    data: &[Observation],
    sigma0: f64,
    cfg: &ExperimentConfig,
) -> CoreResult<KlEstimate> {
    let mut rng = cell_rng(cfg.seed, &format!("mc-{}", data.len()));
    mc_kl_to_posterior(
        belief,
        |theta| logposterior_logistic(theta, data, sigma0),
        cfg.mc_samples,
        &mut rng,
    )
}

fn mc_kl_dense(
    q: &DenseGaussian,
    data: &[Observation],
    sigma0: f64,
    cfg: &ExperimentConfig,
) -> CoreResult<KlEstimate> {
    let mut rng = cell_rng(cfg.seed, &format!("mc-{}", data.len()));
    mc_kl_dense_to_posterior(
        q,
        |theta| logposterior_logistic(theta, data, sigma0),
        cfg.mc_samples,
        &mut rng,
    )
}

pub(crate) fn kl_row(
    checkpoint: usize,
    method: &str,
    p: Option<usize>,
    k: Option<usize>,
    est: &KlEstimate,
    wall_ms: Option<f64>,
) -> ResultRow {
    ResultRow {
        checkpoint,
        method: method.to_string(),
        p,
        k,
        kl: Some(est.value),
        stderr: Some(est.std_error),
        wall_ms,
    }
}

pub(crate) fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Closed-form logistic filter per latent rank against the Laplace approximation.
pub fn run_logistic_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::new(cfg.clone());
    let sigma0 = cfg.sigma0[0];
    let data = regression_data(cfg, sigma0, true)?;
    let d = data.dim;
    check_rank(cfg, d)?;
    let obs: Vec<Observation> = data.stream.collect::<CoreResult<_>>()?;
    let n = obs.len();
    let checkpoints = log_spaced_checkpoints(n, cfg.checkpoints);
    let wants = |m: &str| cfg.methods.iter().any(|x| x == m);

    let mut cells: Vec<(usize, GaussianBelief, Stopwatch)> = Vec::new();
    if wants("lrvga") {
        for &p in &cfg.p {
            let mut rng = cell_rng(cfg.seed, &format!("logistic-init-p{p}"));
            let belief = GaussianBelief::isotropic_prior(d, p, sigma0, cfg.eps_init, &mut rng)?;
            cells.push((p, belief, Stopwatch::default()));
        }
    }
    let mut laplace: Option<DenseGaussian> = None;

    let mut next = checkpoints.iter().peekable();
    for (i, o) in obs.iter().enumerate() {
        let t = i + 1;
        for (_, belief, watch) in &mut cells {
            let prev = &*belief;
            *belief = watch.time(|| lrvga_logistic_step(prev, o, cfg.inner_loops))?;
        }
        if next.peek() != Some(&&t) {
            continue;
        }
        next.next();
        let seen = &obs[..t];
        for (p, belief, watch) in &cells {
            let est = mc_kl(belief, seen, sigma0, cfg)?;
            report.rows.push(kl_row(t, "lrvga", Some(*p), None, &est, watch.per_step_ms(t, cfg.timing)));
        }
        if wants("laplace") {
            let mut watch = Stopwatch::default();
            let fit = watch.time(|| laplace_logistic(seen, d, sigma0, LAPLACE_TOL * (1.0 + t as f64), LAPLACE_MAX_ITER))?;
            let est = mc_kl_dense(&fit, seen, sigma0, cfg)?;
            report.rows.push(kl_row(t, "laplace", None, None, &est, watch.per_step_ms(t, cfg.timing)));
            laplace = Some(fit);
        }
    }

    report.summary.push(format!(
        "experiment: logistic, d = {d}, N = {n}, sigma0 = {sigma0}, MC samples = {}",
        cfg.mc_samples
    ));
    report.summary.extend(data.notes);
    report
        .summary
        .push("KL values are unnormalized: they share the offset -log Z of the posterior".into());
    let laplace_kl = report.final_kl("laplace", None, None);
    report
        .summary
        .push(format!("laplace: final KL {}", fmt_opt(laplace_kl)));
    for (p, belief, _) in &cells {
        let kl = report.final_kl("lrvga", Some(*p), None);
        let mut line = format!(
            "lrvga p={p}: final KL {}, memory estimate {} bytes",
            fmt_opt(kl),
            aux_memory_estimate(d, *p, 0)
        );
        if let (Some(kl), Some(lk)) = (kl, laplace_kl) {
            line += &format!(", ratio to laplace {:.6}, difference {:.6}", kl / lk, kl - lk);
        }
        if let Some(map) = &laplace {
            line += &format!(", cosine to MAP {:.6}", cosine(&belief.mu, &map.mean));
        }
        report.summary.push(line);
    }
    Ok(report)
}

use lrvga::eval::gaussian_kl;
use lrvga::filters::{kalman_step_dense, lrvga_linear_step};
use lrvga::{DenseGaussian, GaussianBelief};

use super::{
    aux_memory_estimate, cell_rng, check_rank, fmt_opt, log_spaced_checkpoints,
    regression_data, Stopwatch,
};
use crate::config::{ExperimentConfig, DENSE_LIMIT};
use crate::error::Result;
use crate::report::{ResultRow, RunReport};

struct Cell {
    p: usize,
    belief: GaussianBelief,
    watch: Stopwatch,
}

/// Linear regression with one filter per latent rank, scored against the
/// exact Kalman posterior when `d` is small enough to hold it.
pub fn run_linear_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::new(cfg.clone());
    let sigma0 = cfg.sigma0[0];
    let data = regression_data(cfg, sigma0, false)?;
    let d = data.dim;
    check_rank(cfg, d)?;
    let exact = d <= DENSE_LIMIT;
    let checkpoints = log_spaced_checkpoints(data.len, cfg.checkpoints);
    let emit_kalman = exact && cfg.methods.iter().any(|m| m == "kalman");
    let run_lrvga = cfg.methods.iter().any(|m| m == "lrvga");

    let mut cells = Vec::new();
    if run_lrvga {
        for &p in &cfg.p {
            let mut rng = cell_rng(cfg.seed, &format!("linear-init-p{p}"));
            cells.push(Cell {
                p,
                belief: GaussianBelief::isotropic_prior(d, p, sigma0, cfg.eps_init, &mut rng)?,
                watch: Stopwatch::default(),
            });
        }
    }
    let mut kalman = exact.then(|| DenseGaussian::isotropic(d, sigma0));
    let mut kalman_watch = Stopwatch::default();

    let mut next = checkpoints.iter().peekable();
    let mut seen = 0;
    for obs in data.stream {
        let obs = obs?;
        seen += 1;
        for cell in &mut cells {
            let belief = &cell.belief;
            cell.belief = cell
                .watch
                .time(|| lrvga_linear_step(belief, &obs, cfg.inner_loops))?;
        }
        if let Some(k) = kalman.as_ref() {
            kalman = Some(kalman_watch.time(|| kalman_step_dense(k, &obs))?);
        }
        if next.peek() != Some(&&seen) {
            continue;
        }
        next.next();
        for cell in &cells {
            let kl = match &kalman {
                Some(k) => Some(gaussian_kl(&cell.belief, k)?),
                None => None,
            };
            report.rows.push(ResultRow {
                checkpoint: seen,
                method: "lrvga".into(),
                p: Some(cell.p),
                k: None,
                kl,
                stderr: None,
                wall_ms: cell.watch.per_step_ms(seen, cfg.timing),
            });
        }
        if emit_kalman {
            report.rows.push(ResultRow {
                checkpoint: seen,
                method: "kalman".into(),
                p: None,
                k: None,
                kl: Some(0.0),
                stderr: None,
                wall_ms: kalman_watch.per_step_ms(seen, cfg.timing),
            });
        }
    }

    report.summary.push(format!(
        "experiment: linear, d = {d}, N = {seen}, sigma0 = {sigma0}"
    ));
    report.summary.extend(data.notes);
    if !exact {
        report.summary.push(format!(
            "d > {DENSE_LIMIT}: exact posterior not formed, KL column left empty"
        ));
    }
    for cell in &cells {
        let b = &cell.belief;
        report.summary.push(format!(
            "lrvga p={}: final KL {}, |mu| = {:.6}, Tr P = {:.6}, memory estimate {} bytes",
            cell.p,
            fmt_opt(report.final_kl("lrvga", Some(cell.p), None)),
            b.mu.norm(),
            b.prec.covariance_trace(),
            aux_memory_estimate(d, cell.p, 0),
        ));
        if let Some(theta) = &data.theta_star {
            report.summary.push(format!(
                "lrvga p={}: |mu - theta*| = {:.6}",
                cell.p,
                (&b.mu - theta).norm()
            ));
        }
    }
    if let Some(k) = &kalman {
        report.summary.push(format!("kalman: |mu| = {:.6}", k.mean.norm()));
    }
    Ok(report)
}

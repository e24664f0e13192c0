use lrvga::data::{
    gen_fa_covariance_samples, normalize_stream, parse_libsvm, LibsvmOptions, NormalizeMode,
    SyntheticCovSpec, DEFAULT_NORMALIZATION_BATCH,
};
use lrvga::dense::DenseSymmetric;
use lrvga::fa::{
    covariance_mode_weights, em_fixed_point_step, guess_s0_scale, init_isotropic_prior,
    online_em_step_size, online_em_update, polyak_ruppert_average, recursive_em_update,
    OnlineEmState,
};
use lrvga::{FaPrecision, LrvgaError, Result as CoreResult};
use nalgebra::{DMatrix, DVector};

use super::{check_rank, cell_rng, fmt_opt, log_spaced_checkpoints, Stopwatch};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::report::{ResultRow, RunReport};

/// `KL(N(0, S) ‖ N(0, W Wᵀ + Ψ))` with `log det S` precomputed.
pub fn covariance_kl(s: &DMatrix<f64>, log_det_s: f64, fa: &FaPrecision) -> CoreResult<f64> {
    let d = s.nrows();
    if fa.dim() != d {
        return Err(LrvgaError::DimensionMismatch {
            expected: d,
            found: fa.dim(),
        });
    }
    // (W Wᵀ + Ψ)⁻¹ = Ψ⁻¹ − L Aᵀ with A = Ψ⁻¹ W.
    let a = fa.scaled_loadings();
    let l = fa.sampling_gain();
    let trace = s.diagonal().component_div(fa.psi()).sum() - (s * &a).component_mul(&l).sum();
    let kl = 0.5 * (trace - d as f64 + fa.log_det()? - log_det_s);
    if !kl.is_finite() {
        return Err(LrvgaError::NonFinite("covariance KL"));
    }
    Ok(kl)
}

fn log_det_spd(s: &DMatrix<f64>) -> CoreResult<f64> {
    let chol = s
        .clone()
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("target covariance"))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Samples and the covariance they are scored against.
fn load_samples(cfg: &ExperimentConfig, notes: &mut Vec<String>) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    if let Some(path) = &cfg.dataset {
        let data = parse_libsvm(path, LibsvmOptions::default())?;
        check_rank(cfg, data.dim)?;
        let take = cfg.n.min(data.observations.len());
        let stream = normalize_stream(
            data.observations.into_iter().take(take),
            NormalizeMode::default(),
        )?;
        notes.push(format!(
            "dataset: {} ({take} inputs, d = {})",
            path.display(),
            data.dim
        ));
        notes.push(format!("input scale factor: {}", stream.scale()));
        let samples: Vec<DVector<f64>> = stream.map(|o| o.x.to_dense()).collect();
        let mut s = DMatrix::zeros(data.dim, data.dim);
        for x in &samples {
            s.ger(1.0 / samples.len() as f64, x, x, 1.0);
        }
        return Ok((samples, s));
    }
    let gen = gen_fa_covariance_samples(
        SyntheticCovSpec {
            d: cfg.d,
            p_true: cfg.p_true,
            seed: cfg.seed,
        },
        cfg.n,
    )?;
    notes.push(format!(
        "synthetic target: d = {}, p_true = {}",
        cfg.d, cfg.p_true
    ));
    let s = gen.covariance();
    Ok((gen.collect(), s))
}

/// Recursive, online and batch EM factorizations of one covariance matrix.
pub fn run_covariance_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::new(cfg.clone());
    let mut notes = Vec::new();
    let (samples, target) = load_samples(cfg, &mut notes)?;
    let n = samples.len();
    let d = target.nrows();
    let log_det_target = log_det_spd(&target)?;
    let head = &samples[..n.min(DEFAULT_NORMALIZATION_BATCH)];
    // The initial covariance is (mean ‖x‖² / d) I.
    let scale = guess_s0_scale(head, d)?;
    let checkpoints = log_spaced_checkpoints(n, cfg.checkpoints);
    let wants = |m: &str| cfg.methods.iter().any(|x| x == m);

    report.summary.push(format!("experiment: cov, d = {d}, N = {n}"));
    report.summary.extend(notes);
    report.summary.push(format!("initial variance guess: {}", 1.0 / (scale * scale)));

    for &p in &cfg.p {
        let init = init_isotropic_prior(d, p, scale, cfg.eps_init, &mut cell_rng(cfg.seed, &format!("cov-init-p{p}")))?;

        if wants("recursive-em") {
            let mut fa = init.clone();
            let mut watch = Stopwatch::default();
            let mut next = checkpoints.iter().peekable();
            for (i, x) in samples.iter().enumerate() {
                let t = i + 1;
                let block = DMatrix::from_column_slice(d, 1, x.as_slice());
                fa = watch.time(|| {
                    // The initial guess acts as one pseudo-observation.
                    recursive_em_update(&fa, &block, covariance_mode_weights(t + 1)?, cfg.inner_loops)
                })?
                .fa;
                if next.peek() == Some(&&t) {
                    next.next();
                    report.rows.push(row(t, "recursive-em", p, &target, log_det_target, &fa, watch.per_step_ms(t, cfg.timing))?);
                }
            }
            report.summary.push(format!(
                "recursive-em p={p}: final KL {}",
                fmt_opt(report.final_kl("recursive-em", Some(p), None))
            ));
        }

        if wants("online-em") {
            let mut fa = init.clone();
            let mut state = OnlineEmState::new(d, p);
            let mut watch = Stopwatch::default();
            let mut next = checkpoints.iter().peekable();
            for (i, x) in samples.iter().enumerate() {
                let t = i + 1;
                let estimate = watch.time(|| -> CoreResult<FaPrecision> {
                    fa = online_em_update(&mut state, &fa, x, online_em_step_size(t))?.fa;
                    if t > n / 2 {
                        polyak_ruppert_average(&mut state, &fa, t, n)
                    } else {
                        Ok(fa.clone())
                    }
                })?;
                if next.peek() == Some(&&t) {
                    next.next();
                    report.rows.push(row(t, "online-em", p, &target, log_det_target, &estimate, watch.per_step_ms(t, cfg.timing))?);
                }
            }
            report.summary.push(format!(
                "online-em p={p}: final KL {}",
                fmt_opt(report.final_kl("online-em", Some(p), None))
            ));
        }

        if wants("batch-em") {
            let mut empirical = DMatrix::zeros(d, d);
            for x in &samples {
                empirical.ger(1.0 / n as f64, x, x, 1.0);
            }
            let op = DenseSymmetric(&empirical);
            let mut fa = ppca_init(&empirical, p)?;
            let mut watch = Stopwatch::default();
            for pass in 1..=cfg.batch_passes {
                fa = watch.time(|| em_fixed_point_step(&fa, &op))?.fa;
                // Each pass touches every sample once.
                let touches = pass * n;
                report.rows.push(row(touches, "batch-em", p, &target, log_det_target, &fa, watch.per_step_ms(touches, cfg.timing))?);
            }
            report.summary.push(format!(
                "batch-em p={p}: KL after {} passes {}",
                cfg.batch_passes,
                fmt_opt(report.final_kl("batch-em", Some(p), None))
            ));
        }
    }
    Ok(report)
}

/// Probabilistic PCA fit of `s`: top-`p` eigenvectors for `W`, the mean
/// trailing eigenvalue for an isotropic `Ψ`. Batch EM starts here.
fn ppca_init(s: &DMatrix<f64>, p: usize) -> CoreResult<FaPrecision> {
    let d = s.nrows();
    let eig = s.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let noise = if p < d {
        order[p..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (d - p) as f64
    } else {
        eig.eigenvalues.min() * 0.5
    }
    .max(lrvga::fa::PSI_FLOOR);
    let mut w = DMatrix::zeros(d, p);
    for (j, &i) in order[..p].iter().enumerate() {
        let scale = (eig.eigenvalues[i] - noise).max(0.0).sqrt();
        w.set_column(j, &(eig.eigenvectors.column(i) * scale));
    }
    FaPrecision::new(w, DVector::from_element(d, noise))
}

fn row(
    checkpoint: usize,
    method: &str,
    p: usize,
    target: &DMatrix<f64>,
    log_det_target: f64,
    fa: &FaPrecision,
    wall_ms: Option<f64>,
) -> Result<ResultRow> {
    Ok(ResultRow {
        checkpoint,
        method: method.to_string(),
        p: Some(p),
        k: None,
        kl: Some(covariance_kl(target, log_det_target, fa)?),
        stderr: None,
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrvga::dense::fa_to_dense;
    use lrvga::eval::gaussian_kl;
    use lrvga::DenseGaussian;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn matches_dense_kl() {
        let mut rng = cell_rng(3, "test");
        let d = 7;
        let w = DMatrix::from_fn(d, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = DVector::from_fn(d, |_, _| 0.5 + rng.random::<f64>());
        let fa = FaPrecision::new(w, psi).unwrap();
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &g * g.transpose() + DMatrix::identity(d, d);
        let kl = covariance_kl(&s, log_det_spd(&s).unwrap(), &fa).unwrap();
        let p = DenseGaussian::new(DVector::zeros(d), s).unwrap();
        let q = DenseGaussian::new(DVector::zeros(d), fa_to_dense(&fa)).unwrap();
        let expected = gaussian_kl(&p, &q).unwrap();
        assert!((kl - expected).abs() < 1e-10 * expected.max(1.0));
    }
}

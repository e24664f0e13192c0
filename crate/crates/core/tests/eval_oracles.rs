mod common;

use common::*;
use lrvga::dense::{fa_to_dense, DenseGaussian};
use lrvga::eval::{
    gaussian_kl, laplace_logistic, logposterior_linear, logposterior_logistic,
    mc_kl_dense_to_posterior, mc_kl_to_posterior,
};
use lrvga::filters::{kalman_step_dense, lrvga_linear_step, sigmoid_prime};
use lrvga::{GaussianBelief, Observation};
use nalgebra::{DMatrix, DVector, DVectorView};
use proptest::prelude::*;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn belief(d: usize, p: usize, seed: u64) -> GaussianBelief {
    let mut r = rng(seed);
    let fa = random_fa(d, p, &mut r);
    GaussianBelief::new(normal_vector(d, &mut r), fa).unwrap()
}

fn as_dense(b: &GaussianBelief) -> DenseGaussian {
    DenseGaussian::new(b.mu.clone(), dense_inverse(&fa_to_dense(&b.prec))).unwrap()
}

/// Textbook KL between two dense Gaussians.
fn dense_kl(q: &DenseGaussian, t: &DenseGaussian) -> f64 {
    let d = q.dim() as f64;
    let tp = dense_inverse(&t.cov);
    let delta = &t.mean - &q.mean;
    let ld = |m: &DMatrix<f64>| 2.0 * m.clone().cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum();
    0.5 * ((&tp * &q.cov).trace() + delta.dot(&(&tp * &delta)) - d + ld(&t.cov) - ld(&q.cov))
}

fn gaussian_log_density(g: &DenseGaussian) -> impl Fn(DVectorView<'_, f64>) -> f64 + '_ {
    let chol = g.cov.clone().cholesky().unwrap();
    let log_det = 2.0 * chol.l().diagonal().map(|v| v.ln()).sum();
    move |theta| {
        let diff = theta - &g.mean;
        let sol = chol.solve(&diff);
        -0.5 * (diff.dot(&sol) + log_det + g.dim() as f64 * LN_2PI)
    }
}

#[test]
fn fa_paths_match_dense_kl() {
    let q = belief(10, 3, 1);
    let t = belief(10, 3, 2);
    let (qd, td) = (as_dense(&q), as_dense(&t));
    let oracle = dense_kl(&qd, &td);
    for value in [
        gaussian_kl(&q, &t).unwrap(),
        gaussian_kl(&q, &td).unwrap(),
        gaussian_kl(&qd, &t).unwrap(),
        gaussian_kl(&qd, &td).unwrap(),
    ] {
        assert!((value - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "{value} vs {oracle}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(s1 in any::<u64>(), s2 in any::<u64>(), d in 2usize..10) {
        let q = belief(d, 2, s1);
        let t = belief(d, 2, s2);
        prop_assert!(gaussian_kl(&q, &t).unwrap() >= -1e-10);
        prop_assert!(gaussian_kl(&q, &q).unwrap().abs() < 1e-10);
        let qd = as_dense(&q);
        prop_assert!(gaussian_kl(&qd, &q).unwrap().abs() < 1e-9);
    }
}

#[test]
fn kl_rejects_indefinite_operand() {
    let q = DenseGaussian::isotropic(2, 1.0);
    let bad = DenseGaussian::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0])).unwrap();
    assert!(gaussian_kl(&q, &bad).is_err());
}

#[test]
fn mc_self_kl_is_zero_within_error() {
    let q = belief(8, 2, 3);
    let qd = as_dense(&q);
    let est = mc_kl_to_posterior(&q, gaussian_log_density(&qd), 2000, &mut rng(4)).unwrap();
    assert!(est.value.abs() < 3.0 * est.std_error + 1e-9, "{est:?}");
    assert!(!est.normalized);
    assert_eq!(est.n_samples, 2000);
}

#[test]
fn mc_kl_recovers_closed_form_plus_offset() {
    let q = belief(6, 2, 5);
    let t = as_dense(&belief(6, 2, 6));
    let c = 3.5;
    let density = gaussian_log_density(&t);
    let est = mc_kl_to_posterior(&q, |th| density(th) + c, 20_000, &mut rng(7)).unwrap();
    let exact = gaussian_kl(&q, &t).unwrap() - c;
    assert!((est.value - exact).abs() < 3.0 * est.std_error, "{est:?} vs {exact}");
}

#[test]
fn mc_standard_error_scales_as_inverse_root() {
    let q = belief(6, 2, 8);
    let t = as_dense(&belief(6, 2, 9));
    let density = gaussian_log_density(&t);
    let ks = [100usize, 1000, 10_000];
    let errs: Vec<f64> = ks
        .iter()
        .map(|&k| mc_kl_to_posterior(&q, &density, k, &mut rng(k as u64)).unwrap().std_error)
        .collect();
    let slope = (errs[2].ln() - errs[0].ln()) / ((ks[2] as f64).ln() - (ks[0] as f64).ln());
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn dense_mc_kl_matches_ensemble_mc_kl() {
    let q = belief(5, 2, 10);
    let t = as_dense(&belief(5, 2, 11));
    let density = gaussian_log_density(&t);
    let a = mc_kl_to_posterior(&q, &density, 20_000, &mut rng(1)).unwrap();
    let b = mc_kl_dense_to_posterior(&as_dense(&q), &density, 20_000, &mut rng(2)).unwrap();
    assert!((a.value - b.value).abs() < 4.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt());
}

/// Normalizing the linear posterior with the Kalman evidence turns the MC
/// estimate into a true KL, which decreases along the stream.
#[test]
fn normalized_linear_kl_decreases_along_the_stream() {
    let d = 10;
    let mut r = rng(12);
    let theta = normal_vector(d, &mut r);
    let mut fa = GaussianBelief::isotropic_prior(d, 3, 1.0, 0.01, &mut r).unwrap();
    let mut kalman = DenseGaussian::isotropic(d, 1.0);
    let mut data = Vec::new();
    let mut log_evidence = 0.0;
    let mut trajectory = Vec::new();
    for t in 1..=400 {
        let x = normal_vector(d, &mut r);
        let y = x.dot(&theta) + normal_vector(1, &mut r)[0];
        let var = 1.0 + x.dot(&(&kalman.cov * &x));
        let resid = y - x.dot(&kalman.mean);
        log_evidence -= 0.5 * (resid * resid / var + var.ln() + LN_2PI);
        let obs = Observation::dense(x, Some(y));
        kalman = kalman_step_dense(&kalman, &obs).unwrap();
        fa = lrvga_linear_step(&fa, &obs, 3).unwrap();
        data.push(obs);
        if t % 20 == 0 {
            let z = log_evidence;
            let est = mc_kl_to_posterior(
                &fa,
                |th| logposterior_linear(th, &data, 1.0) - z,
                1000,
                &mut rng(t as u64),
            )
            .unwrap();
            let exact = gaussian_kl(&fa, &kalman).unwrap();
            assert!((est.value - exact).abs() < 4.0 * est.std_error + 1e-6);
            trajectory.push(est.value);
        }
    }
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let n = trajectory.len();
    assert!(window(&trajectory[n - 5..]) < window(&trajectory[..5]));
}

#[test]
fn linear_log_posterior_peaks_at_ridge_solution() {
    let mut r = rng(13);
    let (n, d, sigma0) = (40, 4, 2.0);
    let xs = normal_matrix(n, d, &mut r);
    let ys = normal_vector(n, &mut r);
    let data: Vec<_> = (0..n)
        .map(|i| Observation::dense(xs.row(i).transpose(), Some(ys[i])))
        .collect();
    let ridge = dense_inverse(&(xs.transpose() * &xs + DMatrix::identity(d, d) / (sigma0 * sigma0)))
        * xs.transpose()
        * &ys;
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1e-5;
        let fd = (logposterior_linear((&ridge + &e).as_view(), &data, sigma0)
            - logposterior_linear((&ridge - &e).as_view(), &data, sigma0))
            / 2e-5;
        assert!(fd.abs() < 1e-5, "{fd}");
    }
    let prior_only = logposterior_linear(ridge.as_view(), &[], sigma0);
    let expected = -0.5 * ridge.norm_squared() / 4.0 - 0.5 * d as f64 * (LN_2PI + 4f64.ln());
    assert!((prior_only - expected).abs() < 1e-12);
}

fn logistic_data(n: usize, d: usize, seed: u64) -> Vec<Observation> {
    let mut r = rng(seed);
    let theta = normal_vector(d, &mut r);
    (0..n)
        .map(|_| {
            let x = normal_vector(d, &mut r);
            let p = 1.0 / (1.0 + (-x.dot(&theta)).exp());
            let y = if rand::Rng::random::<f64>(&mut r) < p { 1.0 } else { 0.0 };
            Observation::dense(x, Some(y))
        })
        .collect()
}

#[test]
fn laplace_is_stationary_with_consistent_precision() {
    let d = 4;
    let data = logistic_data(60, d, 14);
    let post = laplace_logistic(&data, d, 2.0, 1e-9, 100).unwrap();
    let mut grad = -&post.mean / 4.0;
    let mut prec = DMatrix::identity(d, d) / 4.0;
    for obs in &data {
        let x = obs.x.to_dense();
        let z = x.dot(&post.mean);
        grad += &x * (obs.y.unwrap() - 1.0 / (1.0 + (-z).exp()));
        prec += &x * x.transpose() * sigmoid_prime(z);
    }
    assert!(grad.norm() < 1e-9);
    assert!(rel_err(&dense_inverse(&post.cov), &prec) < 1e-10);
}

#[test]
fn laplace_map_matches_grid_search() {
    let data = logistic_data(30, 2, 15);
    let post = laplace_logistic(&data, 2, 1.5, 1e-10, 100).unwrap();
    let (mut best, mut arg) = (f64::NEG_INFINITY, (0.0, 0.0));
    // coarse grid, then a fine grid around the coarse optimum
    for (lo, step, n) in [(-5.0, 0.01, 1000), (0.0, 0.0002, 100)] {
        let (c0, c1) = arg;
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = if lo != 0.0 {
                    (lo + step * i as f64, lo + step * j as f64)
                } else {
                    (c0 - 0.01 + step * i as f64, c1 - 0.01 + step * j as f64)
                };
                let v = logposterior_logistic(DVector::from_vec(vec![a, b]).as_view(), &data, 1.5);
                if v > best {
                    best = v;
                    arg = (a, b);
                }
            }
        }
    }
    assert!((post.mean[0] - arg.0).abs() < 1e-3 && (post.mean[1] - arg.1).abs() < 1e-3);
}

#[test]
fn laplace_reports_non_convergence() {
    let data = logistic_data(30, 3, 16);
    assert!(laplace_logistic(&data, 3, 1.0, 1e-12, 0).is_err());
}

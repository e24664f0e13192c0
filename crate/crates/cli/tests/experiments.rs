use lrvga::data::{gen_logistic_labels, gen_regression_inputs, label_rng, RegressionSpec};
use lrvga::fa::{default_inner_loops, DEFAULT_INIT_EPS};
use lrvga::filters::lrvga_logistic_step;
use lrvga::{GaussianBelief, Observation};
use lrvga_cli::experiments::expectation_table;
use lrvga_cli::{run_experiment, ConfigOverrides, ExperimentConfig, ExperimentKind, RunReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(kind: ExperimentKind, ov: ConfigOverrides) -> RunReport {
    let cfg = ExperimentConfig::resolve(ConfigOverrides {
        experiment: Some(kind),
        ..ov
    })
    .unwrap();
    run_experiment(&cfg).unwrap()
}

fn summary_value(report: &RunReport, line_prefix: &str, key: &str) -> f64 {
    let line = report
        .summary
        .iter()
        .find(|l| l.trim_start().starts_with(line_prefix) && l.contains(key))
        .unwrap_or_else(|| panic!("no summary line {line_prefix:?} with {key:?}"));
    let rest = &line[line.find(key).unwrap() + key.len()..];
    rest.trim_start()
        .split([',', ' '])
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn prior_scale_defaults() {
    let linear = ExperimentConfig::defaults(ExperimentKind::Linear);
    assert_eq!(linear.sigma0, vec![1.0]);
    let logistic = ExperimentConfig::defaults(ExperimentKind::Logistic);
    assert_eq!(logistic.sigma0, vec![4.0]);
    let nonlinear = ExperimentConfig::defaults(ExperimentKind::Nonlinear);
    assert_eq!(nonlinear.sigma0, vec![1.0, 2.0, 3.0]);
    assert_eq!(nonlinear.k_grad, vec![1, 10, 100]);
}

#[test]
fn single_method_gives_one_trajectory() {
    let report = run(
        ExperimentKind::Cov,
        ConfigOverrides {
            d: Some(30),
            n: Some(300),
            methods: Some(vec!["online-em".into()]),
            ..Default::default()
        },
    );
    assert!(!report.rows.is_empty());
    assert!(report.rows.iter().all(|r| r.method == "online-em" && r.p == Some(5)));
    let checkpoints: Vec<usize> = report.rows.iter().map(|r| r.checkpoint).collect();
    assert!(checkpoints.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(*checkpoints.last().unwrap(), 300);
}

#[test]
fn exact_rank_covariance_approaches_zero_kl() {
    let report = run(
        ExperimentKind::Cov,
        ConfigOverrides {
            d: Some(20),
            n: Some(20_000),
            methods: Some(vec!["recursive-em".into()]),
            checkpoints: Some(3),
            ..Default::default()
        },
    );
    let kl: Vec<f64> = report.rows.iter().filter_map(|r| r.kl).collect();
    let last = *kl.last().unwrap();
    assert!(last < 0.05, "final KL {last}");
    assert!(last < 0.01 * kl[0], "{kl:?}");
}

#[test]
#[ignore = "with the default three inner loops the recursive fit stays about 5x above the converged batch fit (see README)"]
fn recursive_em_close_to_converged_batch() {
    let report = run(
        ExperimentKind::Cov,
        ConfigOverrides {
            methods: Some(vec!["recursive-em".into(), "batch-em".into()]),
            batch_passes: Some(20),
            ..Default::default()
        },
    );
    let recursive = report.final_kl("recursive-em", Some(5), None).unwrap();
    let batch = report.final_kl("batch-em", Some(5), None).unwrap();
    assert!(recursive <= 2.0 * batch, "recursive {recursive}, batch {batch}");
}

#[test]
fn larger_rank_is_no_worse() {
    let report = run(ExperimentKind::Linear, ConfigOverrides::default());
    let finals: Vec<f64> = [1, 5, 10]
        .iter()
        .map(|&p| report.final_kl("lrvga", Some(p), None).unwrap())
        .collect();
    for w in finals.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{finals:?}");
    }
    assert!(report.trajectory("kalman", None, None).all(|r| r.kl == Some(0.0)));
}

#[test]
#[ignore = "EM converges sublinearly when p = d, so the final KL stays far above 1e-6 (see README)"]
fn full_rank_matches_kalman() {
    let report = run(
        ExperimentKind::Linear,
        ConfigOverrides {
            p: Some(vec![50]),
            ..Default::default()
        },
    );
    let kl = report.final_kl("lrvga", Some(50), None).unwrap();
    assert!(kl < 1e-6, "final KL {kl}");
}

#[test]
fn logistic_rank_one_converges_and_aligns_with_map() {
    let report = run(
        ExperimentKind::Logistic,
        ConfigOverrides {
            p: Some(vec![1, 5]),
            checkpoints: Some(5),
            ..Default::default()
        },
    );
    let laplace = report.final_kl("laplace", None, None).unwrap();
    for p in [1, 5] {
        let kl = report.final_kl("lrvga", Some(p), None).unwrap();
        assert!(kl.is_finite() && kl <= 1.5 * laplace, "p={p}: {kl} vs {laplace}");
        let cosine = summary_value(&report, &format!("lrvga p={p}:"), "cosine to MAP");
        assert!(cosine > 0.95, "p={p}: cosine {cosine}");
    }
}

#[test]
fn more_gradient_samples_are_no_worse() {
    let report = run(
        ExperimentKind::Nonlinear,
        ConfigOverrides {
            k_grad: Some(vec![1, 100]),
            checkpoints: Some(1),
            ..Default::default()
        },
    );
    for s in [1.0, 2.0, 3.0] {
        let method = format!("sampled@sigma0={s}");
        let few = report.final_kl(&method, Some(10), Some(1)).unwrap();
        let many = report.final_kl(&method, Some(10), Some(100)).unwrap();
        assert!(many <= 1.05 * few, "sigma0={s}: K=100 {many}, K=1 {few}");
    }
}

#[test]
fn ensemble_and_dense_sampling_agree() {
    let (d, p, n, sigma0) = (20, 10, 500, 2.0);
    let spec = RegressionSpec::new(d, n, sigma0, 33);
    let inputs = gen_regression_inputs(&spec).unwrap();
    let obs: Vec<Observation> = gen_logistic_labels(inputs, spec.theta_star().unwrap(), label_rng(&spec))
        .collect::<Result<_, _>>()
        .unwrap();
    let mut belief =
        GaussianBelief::isotropic_prior(d, p, sigma0, DEFAULT_INIT_EPS, &mut ChaCha8Rng::seed_from_u64(34))
            .unwrap();
    for o in &obs {
        belief = lrvga_logistic_step(&belief, o, default_inner_loops(d)).unwrap();
    }
    let table = expectation_table(&belief, &obs, 10, 35).unwrap();
    let dense = table.dense.unwrap();
    assert!((table.ensemble - dense).abs() / dense < 0.01, "{table:?}");
    assert!((table.ensemble - table.closed_form).abs() / table.closed_form < 0.01, "{table:?}");
}

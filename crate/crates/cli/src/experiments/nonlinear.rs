use lrvga::dense::fa_to_dense;
use lrvga::filters::{
    lrvga_logistic_step, lrvga_nonlinear_step, probit_scale, sigmoid, LogisticModel,
    NonlinearConfig,
};
use lrvga::sampler::draw_dense_reference;
use lrvga::{
    EnsembleSampler, Features, GaussianBelief, LrvgaError, Observation, Result as CoreResult,
};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::logistic::{kl_row, mc_kl};
use super::{cell_rng, check_rank, fmt_opt, log_spaced_checkpoints, regression_data, Stopwatch};
use crate::config::{ExperimentConfig, DENSE_LIMIT};
use crate::error::Result;
use crate::report::RunReport;

/// Draw count of the sampling comparison table.
pub const TABLE_SAMPLES: usize = 10;

/// `F(θ) = mean_t σ(x_tᵀθ)` and `Tr P` under closed-form, ensemble and
/// dense Cholesky evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectationTable {
    pub closed_form: f64,
    pub ensemble: f64,
    pub dense: Option<f64>,
    pub trace: f64,
    pub trace_ensemble: f64,
    pub trace_dense: Option<f64>,
}

impl ExpectationTable {
    pub fn lines(&self, k: usize) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"));
        vec![
            format!("  method              Tr P          E[sigmoid(x'theta)]  ({k} draws)"),
            format!("  closed form         {:<12.6}  {:.6}", self.trace, self.closed_form),
            format!("  dense Cholesky      {:<12}  {}", opt(self.trace_dense), opt(self.dense)),
            format!("  ensemble            {:<12.6}  {:.6}", self.trace_ensemble, self.ensemble),
        ]
    }
}

fn projections(x: &Features, samples: &DMatrix<f64>) -> DVector<f64> {
    match x {
        Features::Dense(v) => samples.tr_mul(v),
        Features::Sparse(s) => {
            let mut out = DVector::zeros(samples.ncols());
            for (i, v) in s.iter() {
                out.axpy(v, &samples.row(i).transpose(), 1.0);
            }
            out
        }
    }
}

fn sampled_functional(inputs: &[Observation], samples: &DMatrix<f64>) -> f64 {
    let total: f64 = inputs
        .iter()
        .map(|o| projections(&o.x, samples).map(sigmoid).mean())
        .sum();
    total / inputs.len() as f64
}

fn sample_trace(mu: &DVector<f64>, samples: &DMatrix<f64>) -> f64 {
    samples
        .column_iter()
        .map(|c| (c - mu).norm_squared())
        .sum::<f64>()
        / samples.ncols() as f64
}

/// Compares `k`-draw ensemble and dense-reference estimates of
/// `mean_t E[σ(x_tᵀθ)]` with the probit closed form. The dense reference
/// is skipped above the dense size limit.
pub fn expectation_table(
    belief: &GaussianBelief,
    inputs: &[Observation],
    k: usize,
    seed: u64,
) -> CoreResult<ExpectationTable> {
    if inputs.is_empty() {
        return Err(LrvgaError::InvalidParameter("no inputs to average over".into()));
    }
    let gram = belief.prec.latent_gram();
    let mut closed = 0.0;
    for o in inputs {
        let x = o.x.to_dense();
        let nu = x.dot(&belief.prec.woodbury_apply_with(&gram, &x));
        closed += sigmoid(probit_scale(nu) * x.dot(&belief.mu));
    }
    closed /= inputs.len() as f64;

    let mut rng = cell_rng(seed, "table-ensemble");
    let ens = EnsembleSampler::new(&belief.prec, &mut rng)?.draw(&belief.mu, k)?;
    let (dense, trace_dense) = if belief.dim() <= DENSE_LIMIT {
        let cov = fa_to_dense(&belief.prec)
            .cholesky()
            .ok_or(LrvgaError::NotPositiveDefinite("belief precision"))?
            .inverse();
        let mut rng = cell_rng(seed, "table-dense");
        let draws = draw_dense_reference(&belief.mu, &cov, k, &mut rng)?;
        (
            Some(sampled_functional(inputs, &draws)),
            Some(sample_trace(&belief.mu, &draws)),
        )
    } else {
        (None, None)
    };
    Ok(ExpectationTable {
        closed_form: closed,
        ensemble: sampled_functional(inputs, &ens),
        dense,
        trace: belief.prec.covariance_trace(),
        trace_ensemble: sample_trace(&belief.mu, &ens),
        trace_dense,
    })
}

enum Filter {
    ClosedForm,
    Sampled { cfg: NonlinearConfig, rng: ChaCha8Rng },
}

struct Cell {
    method: String,
    p: usize,
    k: Option<usize>,
    belief: GaussianBelief,
    filter: Filter,
    watch: Stopwatch,
}

/// Sampled mirror-prox filter per `(σ₀, K)` against the closed-form filter.
pub fn run_nonlinear_ablation(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut report = RunReport::new(cfg.clone());
    let scheme = cfg.scheme()?;
    let wants = |m: &str| cfg.methods.iter().any(|x| x == m);
    report.summary.push(format!(
        "experiment: nonlinear, d = {}, N = {}, scheme = {scheme}, MC samples = {}",
        cfg.d, cfg.n, cfg.mc_samples
    ));
    report
        .summary
        .push("KL values are unnormalized: they share the offset -log Z of the posterior".into());

    for &sigma0 in &cfg.sigma0 {
        let data = regression_data(cfg, sigma0, true)?;
        let d = data.dim;
        check_rank(cfg, d)?;
        let obs: Vec<Observation> = data.stream.collect::<CoreResult<_>>()?;
        let n = obs.len();
        let checkpoints = log_spaced_checkpoints(n, cfg.checkpoints);
        let closed_name = format!("closed-form@sigma0={sigma0}");
        let sampled_name = format!("sampled@sigma0={sigma0}");

        let mut cells = Vec::new();
        for &p in &cfg.p {
            let init = GaussianBelief::isotropic_prior(
                d,
                p,
                sigma0,
                cfg.eps_init,
                &mut cell_rng(cfg.seed, &format!("nonlinear-init-s{sigma0}-p{p}")),
            )?;
            if wants("closed-form") {
                cells.push(Cell {
                    method: closed_name.clone(),
                    p,
                    k: None,
                    belief: init.clone(),
                    filter: Filter::ClosedForm,
                    watch: Stopwatch::default(),
                });
            }
            if wants("sampled") {
                for &k in &cfg.k_grad {
                    let step_cfg = NonlinearConfig {
                        k_hess: cfg.k_hess.unwrap_or(k),
                        k_grad: k,
                        inner_loops: cfg.inner_loops,
                        scheme,
                        fresh_samples: cfg.fresh_samples,
                    };
                    let rng = cell_rng(cfg.seed, &format!("nonlinear-s{sigma0}-p{p}-k{k}"));
                    cells.push(Cell {
                        method: sampled_name.clone(),
                        p,
                        k: Some(k),
                        belief: init.clone(),
                        filter: Filter::Sampled { cfg: step_cfg, rng },
                        watch: Stopwatch::default(),
                    });
                }
            }
        }

        let mut next = checkpoints.iter().peekable();
        for (i, o) in obs.iter().enumerate() {
            let t = i + 1;
            for cell in &mut cells {
                let prev = &cell.belief;
                let filter = &mut cell.filter;
                cell.belief = cell.watch.time(|| match filter {
                    Filter::ClosedForm => lrvga_logistic_step(prev, o, cfg.inner_loops),
                    Filter::Sampled { cfg: c, rng } => {
                        lrvga_nonlinear_step(prev, o, &LogisticModel, c, rng)
                    }
                })?;
            }
            if next.peek() != Some(&&t) {
                continue;
            }
            next.next();
            for cell in &cells {
                let est = mc_kl(&cell.belief, &obs[..t], sigma0, cfg)?;
                report.rows.push(kl_row(
                    t,
                    &cell.method,
                    Some(cell.p),
                    cell.k,
                    &est,
                    cell.watch.per_step_ms(t, cfg.timing),
                ));
            }
        }

        report.summary.push(format!("sigma0 = {sigma0}:"));
        report.summary.extend(data.notes.iter().map(|l| format!("  {l}")));
        for &p in &cfg.p {
            let base = report.final_kl(&closed_name, Some(p), None);
            report
                .summary
                .push(format!("  closed-form p={p}: final KL {}", fmt_opt(base)));
            for &k in &cfg.k_grad {
                let kl = report.final_kl(&sampled_name, Some(p), Some(k));
                let mut line = format!("  sampled p={p} K={k}: final KL {}", fmt_opt(kl));
                if let (Some(kl), Some(b)) = (kl, base) {
                    line += &format!(
                        ", relative gap {:.6}, difference {:.6}",
                        (kl - b).abs() / b.abs(),
                        kl - b
                    );
                }
                report.summary.push(line);
            }
        }
        if let Some(cell) = cells.iter().find(|c| matches!(c.filter, Filter::ClosedForm)) {
            let table = expectation_table(&cell.belief, &obs, TABLE_SAMPLES, cfg.seed)?;
            report
                .summary
                .push(format!("  sampling comparison at the closed-form belief, p={}:", cell.p));
            report.summary.extend(table.lines(TABLE_SAMPLES));
        }
    }
    Ok(report)
}


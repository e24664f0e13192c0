use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lrvga_cli::{CliError, ConfigOverrides, ExperimentConfig, ExperimentKind};

/// Runs an L-RVGA experiment and writes results.csv, config.json and summary.txt.
///
/// Settings are layered: experiment defaults, then `--config`, then flags.
#[derive(Debug, Parser)]
#[command(name = "lrvga", version)]
struct Args {
    /// cov, linear, logistic or nonlinear.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    /// Latent ranks, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k_hess: Option<usize>,
    /// Gradient sample counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_grad: Option<Vec<usize>>,
    #[arg(long)]
    inner_loops: Option<usize>,
    /// Prior scales, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    sigma0: Option<Vec<f64>>,
    #[arg(long)]
    eps_init: Option<f64>,
    /// Condition exponent of the synthetic inputs.
    #[arg(long, allow_negative_numbers = true)]
    c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// explicit, mirror-prox-full or mirror-prox-skip-cov.
    #[arg(long)]
    scheme: Option<String>,
    /// LIBSVM file used instead of synthetic data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<usize>,
    /// Methods to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    batch_passes: Option<usize>,
    #[arg(long)]
    p_true: Option<usize>,
    /// Reuse the first-stage random stream in the second mirror-prox stage.
    #[arg(long)]
    replay_samples: bool,
    /// Fill the wall_ms column.
    #[arg(long)]
    timing: bool,
    /// JSON file with any subset of the configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Args {
    fn overrides(self) -> Result<(Option<PathBuf>, ConfigOverrides), CliError> {
        let experiment = self
            .experiment
            .as_deref()
            .map(str::parse::<ExperimentKind>)
            .transpose()?;
        let ov = ConfigOverrides {
            experiment,
            d: self.d,
            p: self.p,
            n: self.n,
            k_hess: self.k_hess,
            k_grad: self.k_grad,
            inner_loops: self.inner_loops,
            sigma0: self.sigma0,
            eps_init: self.eps_init,
            c: self.c,
            seed: self.seed,
            scheme: self.scheme,
            fresh_samples: self.replay_samples.then_some(false),
            dataset: self.dataset,
            p_true: self.p_true,
            checkpoints: self.checkpoints,
            methods: self.methods,
            mc_samples: self.mc_samples,
            batch_passes: self.batch_passes,
            timing: self.timing.then_some(true),
            out: self.out,
        };
        Ok((self.config, ov))
    }
}

fn resolve(args: Args) -> Result<ExperimentConfig, CliError> {
    let (file, flags) = args.overrides()?;
    let base = match file {
        Some(path) => ConfigOverrides::from_json_file(&path)?,
        None => ConfigOverrides::default(),
    };
    ExperimentConfig::resolve(base.merge(flags))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let result = resolve(args).and_then(|cfg| lrvga_cli::run(&cfg).map(|r| (cfg, r)));
    match result {
        Ok((cfg, report)) => {
            for line in &report.summary {
                println!("{line}");
            }
            println!("wrote {}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

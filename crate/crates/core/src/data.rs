//! Synthetic streams, LIBSVM ingestion and input normalization.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, LrvgaError, Result};
use crate::fa::guess_s0_scale_from_norms;
use crate::filters::sigmoid;
use crate::observation::{Observation, SparseVector};

/// Floor added to the squared-normal diagonal of synthetic covariances.
pub const SYNTHETIC_PSI_FLOOR: f64 = 0.1;
/// Leading batch used to estimate the normalization factor.
pub const DEFAULT_NORMALIZATION_BATCH: usize = 100;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `S = Diag(ψ) + W Wᵀ` with standard-normal `W` and `ψ = z² + 0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticCovSpec {
    pub d: usize,
    pub p_true: usize,
    pub seed: u64,
}

/// Sample stream from `N(0, S)` for a [`SyntheticCovSpec`].
#[derive(Debug, Clone)]
pub struct FaCovarianceSamples {
    w: DMatrix<f64>,
    sqrt_psi: DVector<f64>,
    remaining: usize,
    rng: ChaCha8Rng,
}

impl FaCovarianceSamples {
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.sqrt_psi.map(|v| v * v)
    }

    /// The dense target `S`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut s = &self.w * self.w.transpose();
        for (i, v) in self.sqrt_psi.iter().enumerate() {
            s[(i, i)] += v * v;
        }
        s
    }
}

impl Iterator for FaCovarianceSamples {
    type Item = DVector<f64>;

    fn next(&mut self) -> Option<DVector<f64>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let (d, p) = self.w.shape();
        let z = normal_vector(p, &mut self.rng);
        let e = normal_vector(d, &mut self.rng);
        Some(&self.w * z + e.component_mul(&self.sqrt_psi))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for FaCovarianceSamples {}

pub fn gen_fa_covariance_samples(spec: SyntheticCovSpec, n: usize) -> Result<FaCovarianceSamples> {
    if spec.d == 0 || spec.p_true > spec.d {
        return Err(LrvgaError::InvalidParameter(format!(
            "need d >= 1 and p_true <= d, got d = {}, p_true = {}",
            spec.d, spec.p_true
        )));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let w = DMatrix::from_fn(spec.d, spec.p_true, |_, _| rng.sample(StandardNormal));
    let sqrt_psi = DVector::from_fn(spec.d, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        (z * z + SYNTHETIC_PSI_FLOOR).sqrt()
    });
    Ok(FaCovarianceSamples {
        w,
        sqrt_psi,
        remaining: n,
        rng: stream_rng(spec.seed, 1),
    })
}

/// Inputs `x ~ N(0, C)` with `C = Mᵀ Diag(1, 2^{-c}, …, d^{-c}) M`, scaled so
/// that `E ‖x‖² = d`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSpec {
    pub d: usize,
    pub n: usize,
    /// Condition exponent; `cond(C) = d^c`.
    pub c: f64,
    pub sigma0: f64,
    pub seed: u64,
    /// Drawn from the prior `N(0, σ₀² I)` when absent.
    pub theta_star: Option<DVector<f64>>,
}

impl RegressionSpec {
    pub fn new(d: usize, n: usize, sigma0: f64, seed: u64) -> Self {
        Self {
            d,
            n,
            c: 1.0,
            sigma0,
            seed,
            theta_star: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return Err(LrvgaError::InvalidParameter(
                "regression needs d >= 1 and N >= 1".into(),
            ));
        }
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(LrvgaError::InvalidParameter(format!(
                "condition exponent must be >= 0, got {}",
                self.c
            )));
        }
        if !(self.sigma0 > 0.0) {
            return Err(LrvgaError::InvalidParameter(format!(
                "prior scale must be positive, got {}",
                self.sigma0
            )));
        }
        Ok(())
    }

    /// The true parameter: the supplied one, or a seeded draw from the prior.
    pub fn theta_star(&self) -> Result<DVector<f64>> {
        self.validate()?;
        match &self.theta_star {
            Some(t) => {
                check_dim(self.d, t.len())?;
                Ok(t.clone())
            }
            None => Ok(normal_vector(self.d, &mut stream_rng(self.seed, 3)) * self.sigma0),
        }
    }
}

/// Input stream of a [`RegressionSpec`].
#[derive(Debug, Clone)]
pub struct RegressionInputs {
    rotation: Option<DMatrix<f64>>,
    /// `√λᵢ` times the normalization factor.
    scales: DVector<f64>,
    remaining: usize,
    rng: ChaCha8Rng,
}

impl RegressionInputs {
    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    /// `M`, or `None` when `c = 0` and the rotation is skipped.
    pub fn rotation(&self) -> Option<&DMatrix<f64>> {
        self.rotation.as_ref()
    }

    /// Dense `C` after normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let diag = DMatrix::from_diagonal(&self.scales.map(|s| s * s));
        match &self.rotation {
            Some(m) => m.transpose() * diag * m,
            None => diag,
        }
    }
}

impl Iterator for RegressionInputs {
    type Item = DVector<f64>;

    fn next(&mut self) -> Option<DVector<f64>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let z = normal_vector(self.dim(), &mut self.rng).component_mul(&self.scales);
        Some(match &self.rotation {
            Some(m) => m.tr_mul(&z),
            None => z,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for RegressionInputs {}

pub fn gen_regression_inputs(spec: &RegressionSpec) -> Result<RegressionInputs> {
    spec.validate()?;
    let d = spec.d;
    let lambdas = DVector::from_fn(d, |i, _| ((i + 1) as f64).powf(-spec.c));
    let norm = (d as f64 / lambdas.sum()).sqrt();
    let scales = lambdas.map(|l| l.sqrt() * norm);
    let rotation = (spec.c != 0.0).then(|| {
        let mut rng = stream_rng(spec.seed, 0);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        g.qr().q()
    });
    Ok(RegressionInputs {
        rotation,
        scales,
        remaining: spec.n,
        rng: stream_rng(spec.seed, 1),
    })
}

/// `y = xᵀθ* + ε` with standard-normal `ε`, or `ε = 0` when `rng` is `None`.
pub fn gen_linear_labels<I, R>(
    inputs: I,
    theta_star: DVector<f64>,
    mut rng: Option<R>,
) -> impl Iterator<Item = Result<Observation>>
where
    I: IntoIterator<Item = DVector<f64>>,
    R: Rng,
{
    inputs.into_iter().map(move |x| {
        check_dim(theta_star.len(), x.len())?;
        let noise = match rng.as_mut() {
            Some(r) => r.sample::<f64, _>(StandardNormal),
            None => 0.0,
        };
        let y = x.dot(&theta_star) + noise;
        Ok(Observation::dense(x, Some(y)))
    })
}

/// `y ~ Bernoulli(σ(xᵀθ*))`.
pub fn gen_logistic_labels<I, R>(
    inputs: I,
    theta_star: DVector<f64>,
    mut rng: R,
) -> impl Iterator<Item = Result<Observation>>
where
    I: IntoIterator<Item = DVector<f64>>,
    R: Rng,
{
    inputs.into_iter().map(move |x| {
        check_dim(theta_star.len(), x.len())?;
        let prob = sigmoid(x.dot(&theta_star));
        let y = if rng.random::<f64>() < prob { 1.0 } else { 0.0 };
        Ok(Observation::dense(x, Some(y)))
    })
}

/// Generator for label noise of a regression spec, independent of the inputs.
pub fn label_rng(spec: &RegressionSpec) -> ChaCha8Rng {
    stream_rng(spec.seed, 2)
}

/// Options of the LIBSVM reader.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LibsvmOptions {
    /// Map labels `−1`/`+1` to `0`/`1`.
    pub binary_labels: bool,
    /// Fixed dimension; otherwise the largest index seen.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibsvmData {
    pub observations: Vec<Observation>,
    pub dim: usize,
}

pub fn parse_libsvm(path: &Path, opts: LibsvmOptions) -> Result<LibsvmData> {
    let file = File::open(path).map_err(|source| LrvgaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_libsvm_reader(BufReader::new(file), opts).map_err(|e| match e {
        LrvgaError::Io { source, .. } => LrvgaError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

type ParsedRow = (usize, f64, Vec<usize>, Vec<f64>);

/// Reads `label idx:val ...` lines with 1-based indices; `#` starts a comment.
pub fn parse_libsvm_reader<B: BufRead>(reader: B, opts: LibsvmOptions) -> Result<LibsvmData> {
    let mut rows: Vec<ParsedRow> = Vec::new();
    let mut max_index = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|source| LrvgaError::Io {
            path: Default::default(),
            source,
        })?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |message: String| LrvgaError::Parse {
            line: line_no,
            message,
        };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let mut label: f64 = label_tok
            .parse()
            .map_err(|_| bad(format!("invalid label `{label_tok}`")))?;
        if opts.binary_labels {
            label = match label {
                l if l == 1.0 => 1.0,
                l if l == -1.0 || l == 0.0 => 0.0,
                l => return Err(bad(format!("label {l} is not binary"))),
            };
        }
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("expected idx:val, got `{tok}`")))?;
            let i: usize = i
                .parse()
                .map_err(|_| bad(format!("invalid index `{i}`")))?;
            if i == 0 {
                return Err(bad("indices are 1-based".into()));
            }
            let v: f64 = v
                .parse()
                .map_err(|_| bad(format!("invalid value `{v}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value `{v}`")));
            }
            indices.push(i - 1);
            values.push(v);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            log::warn!("line {line_no}: indices are not strictly ascending");
            let mut sorted = indices.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(bad("duplicate index".into()));
            }
        }
        if let Some(&m) = indices.iter().max() {
            max_index = max_index.max(m + 1);
        }
        rows.push((line_no, label, indices, values));
    }
    let dim = match opts.dim {
        Some(d) if d < max_index => {
            return Err(LrvgaError::InvalidParameter(format!(
                "index {max_index} exceeds configured dimension {d}"
            )))
        }
        Some(d) => d,
        None => max_index,
    };
    let observations = rows
        .into_iter()
        .map(|(line, label, idx, val)| {
            SparseVector::new(dim, idx, val)
                .map(|x| Observation::sparse(x, Some(label)))
                .map_err(|e| LrvgaError::Parse {
                    line,
                    message: e.to_string(),
                })
        })
        .collect::<Result<_>>()?;
    Ok(LibsvmData { observations, dim })
}

/// Writes observations as LIBSVM text; zero entries of dense inputs are
/// omitted and missing labels are written as `0`.
pub fn write_libsvm(path: &Path, observations: &[Observation]) -> Result<()> {
    let io_err = |source| LrvgaError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for obs in observations {
        let mut line = format!("{}", obs.y.unwrap_or(0.0));
        let mut push = |i: usize, v: f64| {
            if v != 0.0 {
                line.push_str(&format!(" {}:{}", i + 1, v));
            }
        };
        match &obs.x {
            crate::Features::Dense(x) => x.iter().enumerate().for_each(|(i, &v)| push(i, v)),
            crate::Features::Sparse(x) => x.iter().for_each(|(i, v)| push(i, v)),
        }
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Writes `key=value` lines.
pub fn write_metadata(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(LrvgaError::InvalidParameter(format!(
                "metadata entry `{k}` cannot be written as a single key=value line"
            )));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, text).map_err(|source| LrvgaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metadata(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| LrvgaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or(LrvgaError::Parse {
                    line: i + 1,
                    message: "expected key=value".into(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Scale so that the mean `‖x‖²` over a leading batch equals `d`.
    MeanNorm { batch: usize },
    None,
}

impl Default for NormalizeMode {
    fn default() -> Self {
        Self::MeanNorm {
            batch: DEFAULT_NORMALIZATION_BATCH,
        }
    }
}

/// A stream rescaled by a factor estimated on its leading batch.
#[derive(Debug)]
pub struct NormalizedStream<I> {
    buffered: VecDeque<Observation>,
    rest: I,
    scale: f64,
}

impl<I> NormalizedStream<I> {
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl<I: Iterator<Item = Observation>> Iterator for NormalizedStream<I> {
    type Item = Observation;

    fn next(&mut self) -> Option<Observation> {
        let mut obs = match self.buffered.pop_front() {
            Some(o) => o,
            None => self.rest.next()?,
        };
        if self.scale != 1.0 {
            obs.x.scale(self.scale);
        }
        Some(obs)
    }
}

pub fn normalize_stream<I>(stream: I, mode: NormalizeMode) -> Result<NormalizedStream<I::IntoIter>>
where
    I: IntoIterator<Item = Observation>,
{
    let mut rest = stream.into_iter();
    let batch = match mode {
        NormalizeMode::None => {
            return Ok(NormalizedStream {
                buffered: VecDeque::new(),
                rest,
                scale: 1.0,
            })
        }
        NormalizeMode::MeanNorm { batch } => batch.max(1),
    };
    let buffered: VecDeque<Observation> = rest.by_ref().take(batch).collect();
    let d = match buffered.front() {
        Some(o) => o.dim(),
        None => {
            return Err(LrvgaError::InvalidParameter(
                "cannot normalize an empty stream".into(),
            ))
        }
    };
    for o in &buffered {
        check_dim(d, o.dim())?;
    }
    let scale = guess_s0_scale_from_norms(buffered.iter().map(|o| o.x.norm_squared()), d)?;
    Ok(NormalizedStream {
        buffered,
        rest,
        scale,
    })
}

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, LrvgaError, Result};

/// A sparse input vector stored as sorted `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_dim(indices.len(), values.len())?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(LrvgaError::InvalidParameter(format!(
                "index {bad} out of range for dimension {dim}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LrvgaError::NonFinite("sparse input"));
        }
        let mut pairs: Vec<_> = indices.into_iter().zip(values).collect();
        pairs.sort_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }
}

/// Input vector of an observation.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Dense(DVector<f64>),
    Sparse(SparseVector),
}

impl Features {
    pub fn dim(&self) -> usize {
        match self {
            Features::Dense(x) => x.len(),
            Features::Sparse(x) => x.dim,
        }
    }

    pub fn dot(&self, v: &DVector<f64>) -> f64 {
        match self {
            Features::Dense(x) => x.dot(v),
            Features::Sparse(x) => x.iter().map(|(i, a)| a * v[i]).sum(),
        }
    }

    pub fn norm_squared(&self) -> f64 {
        match self {
            Features::Dense(x) => x.norm_squared(),
            Features::Sparse(x) => x.values.iter().map(|v| v * v).sum(),
        }
    }

    pub fn to_dense(&self) -> DVector<f64> {
        match self {
            Features::Dense(x) => x.clone(),
            Features::Sparse(x) => {
                let mut out = DVector::zeros(x.dim);
                for (i, v) in x.iter() {
                    out[i] = v;
                }
                out
            }
        }
    }

    /// `scale · x` as a `d×1` block.
    pub fn scaled_column(&self, scale: f64) -> DMatrix<f64> {
        let mut col = DMatrix::zeros(self.dim(), 1);
        match self {
            Features::Dense(x) => col.column_mut(0).axpy(scale, x, 0.0),
            Features::Sparse(x) => {
                for (i, v) in x.iter() {
                    col[(i, 0)] = scale * v;
                }
            }
        }
        col
    }

    /// `out += a · x`.
    pub fn axpy_into(&self, a: f64, out: &mut DVector<f64>) {
        match self {
            Features::Dense(x) => out.axpy(a, x, 1.0),
            Features::Sparse(x) => {
                for (i, v) in x.iter() {
                    out[i] += a * v;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match self {
            Features::Dense(x) => *x *= factor,
            Features::Sparse(x) => x.values.iter_mut().for_each(|v| *v *= factor),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Features::Dense(x) => x.iter().all(|&v| v == 0.0),
            Features::Sparse(x) => x.values.iter().all(|&v| v == 0.0),
        }
    }
}

/// An input `x` with an optional label `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: Features,
    pub y: Option<f64>,
}

impl Observation {
    pub fn dense(x: DVector<f64>, y: Option<f64>) -> Self {
        Self {
            x: Features::Dense(x),
            y,
        }
    }

    pub fn sparse(x: SparseVector, y: Option<f64>) -> Self {
        Self {
            x: Features::Sparse(x),
            y,
        }
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub(crate) fn label(&self) -> Result<f64> {
        match self.y {
            Some(y) if y.is_finite() => Ok(y),
            Some(_) => Err(LrvgaError::NonFinite("label")),
            None => Err(LrvgaError::InvalidParameter(
                "observation has no label".into(),
            )),
        }
    }
}

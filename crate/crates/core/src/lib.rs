//! Limited-memory recursive variational Gaussian approximation.
//!
//! Beliefs are Gaussians whose precision is kept in factor-analysis form
//! `W Wᵀ + Ψ` (tall `W` of rank `p`, diagonal `Ψ`), so every update, solve,
//! determinant and sample costs `O(d p²)` time and `O(d p)` memory.

pub mod data;
pub mod dense;
pub mod error;
pub mod eval;
pub mod fa;
pub mod filters;
mod linalg;
pub mod observation;
pub mod sampler;

pub use dense::DenseGaussian;
pub use error::{LrvgaError, Result};
pub use fa::{FaPrecision, RecursionWeights};
pub use filters::GaussianBelief;
pub use observation::{Features, Observation, SparseVector};
pub use sampler::EnsembleSampler;

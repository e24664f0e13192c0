#![allow(dead_code)]

use lrvga::FaPrecision;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix<R: Rng>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn random_fa<R: Rng>(d: usize, p: usize, rng: &mut R) -> FaPrecision {
    let w = normal_matrix(d, p, rng);
    let psi = DVector::from_fn(d, |_, _| 0.1 + 2.0 * rng.random::<f64>());
    FaPrecision::new(w, psi).unwrap()
}

/// Second moment of `n` standard-normal vectors plus a small ridge.
pub fn random_spd<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let a = normal_matrix(d, d + 3, rng);
    &a * a.transpose() / (d + 3) as f64 + DMatrix::identity(d, d) * 0.1
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn dense_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().cholesky().expect("SPD").inverse()
}

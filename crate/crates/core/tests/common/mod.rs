#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdanet::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut *rng); scale * z }).collect()
}

pub fn randn_tensor(dims: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), randn_vec(n, scale, &mut r)).unwrap()
}

pub fn to_matrix(w: &Tensor<f64>) -> DMatrix<f64> {
    let n = w.dims()[0];
    DMatrix::from_row_slice(n, w.dims()[1], w.data())
}

/// Exact σ(WᵀW − I): square root of the top eigenvalue of MᵀM from a dense
/// symmetric eigendecomposition.
pub fn dense_orth_deviation(w: &Tensor<f64>) -> f64 {
    let m = to_matrix(w);
    let n = m.ncols();
    let dev = m.transpose() * &m - DMatrix::<f64>::identity(n, n);
    let gram = dev.transpose() * &dev;
    let eig = SymmetricEigen::new(gram);
    eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max).sqrt()
}

/// Householder reflection I − 2vvᵀ/‖v‖² for a random v.
pub fn householder(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let v = randn_vec(n, 1.0, &mut r);
    let nn: f64 = v.iter().map(|x| x * x).sum();
    Tensor::from_fn([n, n], |k| {
        let (i, j) = (k / n, k % n);
        (if i == j { 1.0 } else { 0.0 }) - 2.0 * v[i] * v[j] / nn
    })
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k, m) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    Tensor::from_fn([n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..k).map(|t| a.data()[i * k + t] * b.data()[t * m + j]).sum()
    })
}

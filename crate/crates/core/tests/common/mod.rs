#![allow(dead_code)]

use d2moe::{Expert, Matrix, MoELayer, MoEModel};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn gaussian(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gaussian_matrix(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * gaussian(rng))
}

/// Random model with `layers` layers, uniform weights scaled by 1/sqrt(fan-in).
pub fn random_model(seed: u64, layers: usize, n: usize, d: usize, h: usize, k: usize, classes: usize) -> MoEModel {
    let mut r = rng(seed);
    let mut ls = Vec::new();
    for _ in 0..layers {
        let gate = uniform(&mut r, n, d, 1.0);
        let experts = (0..n)
            .map(|_| Expert {
                up: uniform(&mut r, h, d, 1.5 / (d as f64).sqrt()),
                down: uniform(&mut r, d, h, 1.5 / (h as f64).sqrt()),
            })
            .collect();
        ls.push(MoELayer::new(gate, experts, k).unwrap());
    }
    let head = uniform(&mut r, classes, d, 1.0);
    MoEModel::new(ls, head).unwrap()
}

/// Symmetric positive definite matrix with spread-out eigenvalues.
pub fn anisotropic_gram(rng: &mut StdRng, n: usize, tokens: usize) -> Matrix {
    let scales: Vec<f64> = (0..n).map(|i| 4.0f64.powf(-(i as f64) / 2.0) * 3.0).collect();
    let mix = gaussian_matrix(rng, n, n, 1.0);
    let x = Matrix::from_fn(n, tokens, |i, _| scales[i] * gaussian(rng));
    let x = mix.matmul(&x).unwrap();
    x.matmul(&x.transpose()).unwrap()
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// Plain matmul by triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum())
}

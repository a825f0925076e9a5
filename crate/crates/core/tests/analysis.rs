mod common;

use common::*;
use d2moe::analysis::{allocate_adaptive_ratios, cka, energy_retention, layer_sensitivity_scan, rank_granule};
use d2moe::factorize::RankPolicy;
use d2moe::linalg::svd;
use d2moe::merge::MergeMethod;
use d2moe::pipeline::CompressionConfig;
use d2moe::Matrix;
use proptest::prelude::*;

/// `tr(HKHL)/√(tr(HKHK)·tr(HLHL))` with an explicit centering matrix.
fn cka_oracle(a: &Matrix, b: &Matrix) -> f64 {
    let m = a.rows();
    let h = Matrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64);
    let k = naive_matmul(a, &a.transpose());
    let l = naive_matmul(b, &b.transpose());
    let hkh = naive_matmul(&naive_matmul(&h, &k), &h);
    let hlh = naive_matmul(&naive_matmul(&h, &l), &h);
    let kl = naive_matmul(&hkh, &hlh).trace();
    let kk = naive_matmul(&hkh, &hkh).trace();
    let ll = naive_matmul(&hlh, &hlh).trace();
    kl / (kk * ll).sqrt()
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(seed: u64, n: usize) -> Matrix {
    let mut r = rng(seed);
    let a = gaussian_matrix(&mut r, n, n, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v = a.col(j);
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

#[test]
fn cka_matches_explicit_centering() {
    let mut r = rng(600);
    for _ in 0..5 {
        let a = uniform(&mut r, 9, 4, 1.0);
        let b = uniform(&mut r, 9, 6, 1.0);
        assert!((cka(&a, &b).unwrap() - cka_oracle(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn cka_self_and_invariances() {
    let mut r = rng(601);
    let a = uniform(&mut r, 12, 5, 1.0);
    let b = uniform(&mut r, 12, 7, 1.0);
    assert!((cka(&a, &a).unwrap() - 1.0).abs() <= 1e-10);
    let base = cka(&a, &b).unwrap();
    let q = orthogonal(602, 5);
    assert!((cka(&naive_matmul(&a, &q), &b).unwrap() - base).abs() <= 1e-10);
    assert!((cka(&a.scale(3.7), &b).unwrap() - base).abs() <= 1e-10);
    assert!((cka(&a, &b).unwrap() - cka(&b, &a).unwrap()).abs() <= 1e-12);
    assert!(base > 0.0 && base < 1.0);
    assert!(cka(&a, &uniform(&mut r, 11, 5, 1.0)).is_err());
}

#[test]
fn energy_retention_of_exact_low_rank() {
    let mut r = rng(603);
    let m = naive_matmul(&uniform(&mut r, 10, 3, 1.0), &uniform(&mut r, 3, 8, 1.0));
    let s = svd(&m).unwrap().sigma;
    assert!(energy_retention(&s, 3).unwrap() > 1.0 - 1e-12);
    assert!(energy_retention(&s, 2).unwrap() < 1.0);
    assert_eq!(energy_retention(&s, 0).unwrap(), 0.0);
}

#[test]
fn proportional_allocation_oracle() {
    let a = allocate_adaptive_ratios(&[1.0, 2.0, 3.0], &[100, 100, 100], 0.5, 0.1).unwrap();
    for (got, want) in a.ratios.iter().zip([0.25, 0.5, 0.75]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!((a.allocated - a.budget).abs() < 1e-9);
}

#[test]
fn clipped_allocation_redistributes() {
    // 1·c + 10·c would put the second layer above 1; it clips and the first absorbs the rest.
    let a = allocate_adaptive_ratios(&[1.0, 10.0], &[50, 50], 0.7, 0.1).unwrap();
    assert_eq!(a.ratios[1], 1.0);
    assert!((a.ratios[0] - 0.4).abs() < 1e-12);
    // Tiny sensitivity clips at the floor.
    let a = allocate_adaptive_ratios(&[1e-6, 1.0, 1.0], &[10, 10, 10], 0.4, 0.1).unwrap();
    assert_eq!(a.ratios[0], 0.1);
    assert!((a.ratios[1] - 0.55).abs() < 1e-12);
    assert!((a.allocated - a.budget).abs() < 1e-9);
}

#[test]
fn granule_counts_rank_unit() {
    assert_eq!(rank_granule(8, 32, 64), 2 * 8 * 96);
}

#[test]
fn sensitivity_scan_is_deterministic_and_zero_when_lossless() {
    let model = random_model(610, 2, 4, 6, 8, 2, 3);
    let mut r = rng(611);
    let calib = uniform(&mut r, 6, 40, 1.0);
    let labels: Vec<usize> = (0..40).map(|j| j % 3).collect();
    let lossy = CompressionConfig { merge: MergeMethod::Mean, rank_policy: RankPolicy::Ratio(0.2), ..Default::default() };
    let a = layer_sensitivity_scan(&model, &calib, &labels, &lossy).unwrap();
    let b = layer_sensitivity_scan(&model, &calib, &labels, &lossy).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.loss_increase.len(), 2);
    assert_eq!(a.probe_ratio, 0.2);
    let lossless = CompressionConfig { merge: MergeMethod::Mean, ..CompressionConfig::lossless() };
    let z = layer_sensitivity_scan(&model, &calib, &labels, &lossless).unwrap();
    assert!(z.loss_increase.iter().all(|d| d.abs() < 1e-7));
}

proptest! {
    #[test]
    fn allocation_preserves_budget_and_order(
        sens in proptest::collection::vec(0.0f64..5.0, 1..8),
        budget in 0.15f64..0.95,
    ) {
        let params = vec![100usize; sens.len()];
        let a = allocate_adaptive_ratios(&sens, &params, budget, 0.1).unwrap();
        prop_assert!((a.allocated - a.budget).abs() < 1e-7 * a.budget.max(1.0));
        for i in 0..sens.len() {
            prop_assert!(a.ratios[i] >= 0.1 - 1e-12 && a.ratios[i] <= 1.0 + 1e-12);
            for j in 0..sens.len() {
                if sens[i] > 0.0 && sens[j] > 0.0 && sens[i] < sens[j] {
                    prop_assert!(a.ratios[i] <= a.ratios[j] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cka_is_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, 6, 3, 1.0);
        let b = uniform(&mut r, 6, 4, 1.0);
        let v = cka(&a, &b).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
    }
}

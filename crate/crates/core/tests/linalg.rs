mod common;

use common::*;
use d2moe::linalg::{
    cholesky_damped, col_l2_norms, right_solve_lower, row_l2_norms, solve_lower_triangular, svd, DEFAULT_DAMPING,
};
use d2moe::Matrix;
use proptest::prelude::*;

/// Symmetric eigenvalues by cyclic two-sided Jacobi rotations on `A`.
fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

fn orthonormal_err(q: &Matrix) -> f64 {
    naive_matmul(&q.transpose(), q).sub(&Matrix::identity(q.cols())).unwrap().max_abs()
}

#[test]
fn svd_matches_jacobi_eigen_oracle() {
    let mut r = rng(11);
    let m = uniform(&mut r, 8, 5, 1.0);
    let s = svd(&m).unwrap();
    let gram = naive_matmul(&m.transpose(), &m);
    let oracle: Vec<f64> = jacobi_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    for (a, b) in s.sigma.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let resid = s.reconstruct(5).sub(&m).unwrap().frobenius_norm();
    assert!(resid <= 1e-10 * m.frobenius_norm());
    assert!(orthonormal_err(&s.u) < 1e-9);
    assert!(orthonormal_err(&s.v) < 1e-9);
}

#[test]
fn svd_wide_and_large() {
    let mut r = rng(12);
    for &(m, n) in &[(5, 9), (64, 64), (200, 120), (120, 512)] {
        let a = uniform(&mut r, m, n, 1.0);
        let s = svd(&a).unwrap();
        assert_eq!(s.sigma.len(), m.min(n));
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        let resid = s.reconstruct(m.min(n)).sub(&a).unwrap().frobenius_norm();
        assert!(resid <= 1e-10 * a.frobenius_norm(), "{m}x{n}: {resid}");
        assert!(orthonormal_err(&s.u) < 1e-9);
        assert!(orthonormal_err(&s.v) < 1e-9);
    }
}

#[test]
fn svd_is_deterministic() {
    let mut r = rng(13);
    let a = uniform(&mut r, 17, 9, 1.0);
    let s1 = svd(&a).unwrap();
    let s2 = svd(&a.clone()).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn svd_eckart_young_against_random_candidates() {
    let mut r = rng(14);
    let m = uniform(&mut r, 6, 6, 1.0);
    let s = svd(&m).unwrap();
    for k in 1..=6 {
        let best = s.reconstruct(k).sub(&m).unwrap().frobenius_norm();
        for _ in 0..200 {
            let a = gaussian_matrix(&mut r, 6, k, 1.0);
            let b = gaussian_matrix(&mut r, k, 6, 1.0);
            let cand = naive_matmul(&a, &b);
            let err = cand.sub(&m).unwrap().frobenius_norm();
            assert!(best <= err + 1e-12, "k={k}: truncated {best} > candidate {err}");
        }
    }
}

#[test]
fn cholesky_of_singular_gram_needs_damping() {
    let mut r = rng(15);
    let a = uniform(&mut r, 4, 6, 1.0);
    let g = naive_matmul(&a.transpose(), &a);
    let c = cholesky_damped(&g, DEFAULT_DAMPING).unwrap();
    assert!(c.damping > 0.0);
    let recon = naive_matmul(&c.factor, &c.factor.transpose());
    let target = g.add(&Matrix::identity(6).scale(c.damping)).unwrap();
    assert!(recon.sub(&target).unwrap().frobenius_norm() <= 1e-9);
    for i in 0..6 {
        for j in i + 1..6 {
            assert_eq!(c.factor[(i, j)], 0.0);
        }
    }
}

#[test]
fn triangular_solve_residual() {
    let mut r = rng(16);
    let mut s = uniform(&mut r, 16, 16, 1.0);
    for i in 0..16 {
        for j in i + 1..16 {
            s[(i, j)] = 0.0;
        }
        s[(i, i)] = 1.0 + s[(i, i)].abs();
    }
    let rhs = uniform(&mut r, 16, 3, 1.0);
    let z = solve_lower_triangular(&s, &rhs).unwrap();
    let resid = naive_matmul(&s, &z).sub(&rhs).unwrap().frobenius_norm();
    assert!(resid <= 1e-11 * rhs.frobenius_norm());

    let b = uniform(&mut r, 5, 16, 1.0);
    let x = right_solve_lower(&b, &s).unwrap();
    let resid = naive_matmul(&x, &s).sub(&b).unwrap().frobenius_norm();
    assert!(resid <= 1e-11 * b.frobenius_norm());
}

#[test]
fn norms_match_square_sum_oracle() {
    let mut r = rng(17);
    let m = uniform(&mut r, 10, 7, 2.0);
    let cols = col_l2_norms(&m);
    for j in 0..7 {
        let o: f64 = (0..10).map(|i| m[(i, j)].powi(2)).sum::<f64>().sqrt();
        assert!((cols[j] - o).abs() < 1e-12);
    }
    let rows = row_l2_norms(&m);
    for i in 0..10 {
        let o: f64 = (0..7).map(|j| m[(i, j)].powi(2)).sum::<f64>().sqrt();
        assert!((rows[i] - o).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn svd_reconstructs_random_shapes(m in 1usize..=64, n in 1usize..=64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, m, n, 1.0);
        let s = svd(&a).unwrap();
        prop_assert!(s.sigma.iter().all(|&v| v >= 0.0));
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        let resid = s.reconstruct(m.min(n)).sub(&a).unwrap().frobenius_norm();
        prop_assert!(resid <= 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn damped_cholesky_reconstructs(n in 1usize..=12, rank in 1usize..=12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, rank, n, 1.0);
        let g = naive_matmul(&a.transpose(), &a);
        let c = cholesky_damped(&g, DEFAULT_DAMPING).unwrap();
        let recon = naive_matmul(&c.factor, &c.factor.transpose());
        let target = g.add(&Matrix::identity(n).scale(c.damping)).unwrap();
        prop_assert!(recon.sub(&target).unwrap().frobenius_norm() <= 1e-9);
        let again = cholesky_damped(&g, DEFAULT_DAMPING).unwrap();
        prop_assert_eq!(c, again);
    }
}

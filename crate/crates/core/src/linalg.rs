//! Dense decompositions: one-sided Jacobi SVD, damped Cholesky, triangular
//! solves and row/column norms.
//!
//! Everything here is a pure function of its inputs and runs in a fixed
//! operation order, so repeated calls are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

const MAX_SWEEPS: usize = 80;
const CHOLESKY_DOUBLINGS: u32 = 10;

/// Default damping factor, multiplied by `trace(G)/dim`.
pub const DEFAULT_DAMPING: f64 = 1e-8;

/// Thin singular value decomposition `M = U·diag(σ)·Vᵀ` with `r = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// n×r, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_k·diag(σ_k)·V_kᵀ`.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = Matrix::zeros(m, n);
        for t in 0..k.min(self.sigma.len()) {
            let u = self.u.col(t);
            let v = self.v.col(t);
            out.add_outer(self.sigma[t], &u, &v);
        }
        out
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Each left singular vector is signed so that its first entry that is
/// not negligible is positive. Columns belonging to (numerically) zero
/// singular values are completed to an orthonormal set.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "svd" });
    }
    let (rows, cols) = m.shape();
    if rows < cols {
        let t = svd_tall(&m.transpose(), rows, cols)?;
        let mut out = SvdResult { u: t.v, sigma: t.sigma, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    } else {
        let mut out = svd_tall(m, rows, cols)?;
        fix_signs(&mut out);
        Ok(out)
    }
}

/// SVD of a matrix with at least as many rows as columns. `shape` is the
/// caller-visible shape for error reporting.
fn svd_tall(a: &Matrix, shape_rows: usize, shape_cols: usize) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * libm::sqrt(m as f64);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { rows: shape_rows, cols: shape_cols });
    }

    let norms: Vec<f64> = work.iter().map(|c| libm::sqrt(dot(c, c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps lower index first among equal values.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(core::cmp::Ordering::Equal));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let cutoff = smax * f64::EPSILON * (m.max(n) as f64);

    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .zip(&sigma)
        .map(|(&j, &s)| {
            if s > cutoff && s > 0.0 {
                Some(work[j].iter().map(|v| v / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut ucols, m);

    let u = Matrix::from_columns(&ucols.into_iter().map(|c| c.unwrap()).collect::<Vec<_>>());
    let v = Matrix::from_columns(&order.iter().map(|&j| vcols[j].clone()).collect::<Vec<_>>());
    Ok(SvdResult { u, sigma, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other slot,
/// drawn from the standard basis by modified Gram-Schmidt.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut basis_idx = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while basis_idx < dim {
            let mut cand = vec![0.0; dim];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let nrm = libm::sqrt(dot(&cand, &cand));
            if nrm > 1e-6 {
                cand.iter_mut().for_each(|c| *c /= nrm);
                cols[slot] = Some(cand);
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    let (m, r) = svd.u.shape();
    for j in 0..r {
        let col = svd.u.col(j);
        let scale = col.iter().fold(0.0, |a: f64, v| a.max(v.abs()));
        let first = col.iter().copied().find(|v| v.abs() > 1e-12 * scale);
        if matches!(first, Some(v) if v < 0.0) {
            for i in 0..m {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, j)] = -svd.v[(i, j)];
            }
        }
    }
}

/// Lower Cholesky factor of `G + λI` together with the damping actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedCholesky {
    pub factor: Matrix,
    pub damping: f64,
}

/// Cholesky factorization with escalating diagonal damping.
///
/// The first attempt uses `λ₀ = base_damping·trace(G)/dim` (or `base_damping`
/// when the trace is zero); λ doubles after each failure, up to ten times.
pub fn cholesky_damped(g: &Matrix, base_damping: f64) -> Result<DampedCholesky> {
    let (n, c) = g.shape();
    if n != c {
        return Err(Error::ShapeMismatch { op: "cholesky", detail: format!("{n}x{c} is not square") });
    }
    if !g.is_finite() {
        return Err(Error::NonFinite { op: "cholesky" });
    }
    if !(base_damping >= 0.0) || !base_damping.is_finite() {
        return Err(Error::InvalidParameter {
            name: "damping",
            detail: format!("{base_damping} must be a finite non-negative number"),
        });
    }
    let sym_tol = 1e-9 * g.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (g[(i, j)] - g[(j, i)]).abs() > sym_tol {
                return Err(Error::NotSymmetric { dim: n });
            }
        }
    }
    let trace = g.trace();
    let scale = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let mut lambda = base_damping * scale;
    for attempt in 0..=CHOLESKY_DOUBLINGS {
        if let Some(factor) = try_cholesky(g, lambda) {
            return Ok(DampedCholesky { factor, damping: lambda });
        }
        if attempt < CHOLESKY_DOUBLINGS {
            lambda *= 2.0;
        }
    }
    Err(Error::NotPositiveDefinite { dim: n, last_damping: lambda })
}

fn try_cholesky(g: &Matrix, lambda: f64) -> Option<Matrix> {
    let n = g.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = g[(j, j)] + lambda;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = libm::sqrt(d);
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

fn check_triangular(s: &Matrix, op: &'static str) -> Result<usize> {
    let (n, c) = s.shape();
    if n != c {
        return Err(Error::ShapeMismatch { op, detail: format!("{n}x{c} is not square") });
    }
    for i in 0..n {
        if s[(i, i)] == 0.0 {
            return Err(Error::SingularTriangular { index: i });
        }
    }
    Ok(n)
}

/// Solves `S·Z = rhs` for lower-triangular `S` by forward substitution.
pub fn solve_lower_triangular(s: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = check_triangular(s, "solve_lower_triangular")?;
    if rhs.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower_triangular",
            detail: format!("factor {n}x{n}, rhs {}x{}", rhs.rows(), rhs.cols()),
        });
    }
    let mut z = rhs.clone();
    for col in 0..rhs.cols() {
        for i in 0..n {
            let mut acc = z[(i, col)];
            for k in 0..i {
                acc -= s[(i, k)] * z[(k, col)];
            }
            z[(i, col)] = acc / s[(i, i)];
        }
    }
    Ok(z)
}

/// Solves `Sᵀ·Z = rhs` for lower-triangular `S` by back substitution.
pub fn solve_lower_transposed(s: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = check_triangular(s, "solve_lower_transposed")?;
    if rhs.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower_transposed",
            detail: format!("factor {n}x{n}, rhs {}x{}", rhs.rows(), rhs.cols()),
        });
    }
    let mut z = rhs.clone();
    for col in 0..rhs.cols() {
        for i in (0..n).rev() {
            let mut acc = z[(i, col)];
            for k in i + 1..n {
                acc -= s[(k, i)] * z[(k, col)];
            }
            z[(i, col)] = acc / s[(i, i)];
        }
    }
    Ok(z)
}

/// Returns `X = B·S⁻¹` for lower-triangular `S`, i.e. solves `X·S = B`
/// row by row without forming the inverse.
pub fn right_solve_lower(b: &Matrix, s: &Matrix) -> Result<Matrix> {
    let n = check_triangular(s, "right_solve_lower")?;
    if b.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "right_solve_lower",
            detail: format!("lhs {}x{}, factor {n}x{n}", b.rows(), b.cols()),
        });
    }
    let mut x = b.clone();
    for r in 0..b.rows() {
        let row = x.row_mut(r);
        for j in (0..n).rev() {
            let mut acc = row[j];
            for i in j + 1..n {
                acc -= row[i] * s[(i, j)];
            }
            row[j] = acc / s[(j, j)];
        }
    }
    Ok(x)
}

/// Euclidean norm of each column.
pub fn col_l2_norms(m: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v * v;
        }
    }
    acc.into_iter().map(libm::sqrt).collect()
}

/// Euclidean norm of each row.
pub fn row_l2_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| libm::sqrt(dot(m.row(i), m.row(i)))).collect()
}

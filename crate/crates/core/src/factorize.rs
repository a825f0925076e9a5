//! Low-rank factorization of delta weights.
//!
//! The truncation-aware variant whitens the delta by the Cholesky factor `S`
//! of the input Gram matrix (`S·Sᵀ = X·Xᵀ + λI`), truncates the SVD of
//! `ΔW·S`, and folds `S⁻¹` back into the right factor with triangular solves.
//! Truncating in the whitened space minimizes `‖(ΔW − ΔU·ΔV)·X‖_F`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_damped, right_solve_lower, svd};
use crate::matrix::Matrix;
use crate::moe::Role;

/// `ΔW ≈ u·v` with `u: m×k`, `v: k×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaFactor {
    pub u: Matrix,
    pub v: Matrix,
    pub rank: usize,
    pub expert: usize,
    pub role: Role,
}

impl DeltaFactor {
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.cols())
    }

    pub fn param_count(&self) -> usize {
        (self.u.rows() + self.v.cols()) * self.rank
    }

    pub fn product(&self) -> Matrix {
        self.u.matmul(&self.v).expect("factor shapes agree")
    }

    /// `u·(v·x)` without forming the product.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.u.matvec(&self.v.matvec(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankPolicy {
    /// Keep at most fraction `p` of the dense parameter count.
    Ratio(f64),
    Fixed(usize),
    Lossless,
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::Ratio(p) if !(p > 0.0 && p <= 1.0) => Err(Error::InvalidParameter {
                name: "ratio_delta",
                detail: format!("{p} not in (0, 1]"),
            }),
            RankPolicy::Fixed(0) => Err(Error::InvalidParameter { name: "rank", detail: "must be >= 1".into() }),
            _ => Ok(()),
        }
    }

    /// Rank for an `m×n` matrix, clamped to `[1, min(m, n)]`.
    pub fn rank(&self, m: usize, n: usize) -> usize {
        match *self {
            RankPolicy::Ratio(p) => rank_for_ratio(m, n, p),
            RankPolicy::Fixed(k) => k.clamp(1, m.min(n)),
            RankPolicy::Lossless => m.min(n),
        }
    }
}

/// Largest `k ≥ 1` with `(m+n)·k ≤ p·m·n`, i.e. `max(1, ⌊p·m·n/(m+n)⌋)`.
pub fn rank_for_ratio(m: usize, n: usize, p: f64) -> usize {
    let k = libm::floor(p * (m * n) as f64 / (m + n) as f64) as usize;
    k.clamp(1, m.min(n))
}

/// Which SVD variant factorizes the deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    TruncationAware,
    Vanilla,
    /// Diagonal whitening by per-feature activation norms (ablation).
    ActivationAware,
}

impl SvdMethod {
    pub fn name(self) -> &'static str {
        match self {
            SvdMethod::TruncationAware => "truncation-aware",
            SvdMethod::Vanilla => "vanilla",
            SvdMethod::ActivationAware => "activation-aware",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "truncation-aware" => Some(SvdMethod::TruncationAware),
            "vanilla" => Some(SvdMethod::Vanilla),
            "activation-aware" => Some(SvdMethod::ActivationAware),
            _ => None,
        }
    }
}

fn check_rank(op: &'static str, delta: &Matrix, k: usize) -> Result<()> {
    let r = delta.rows().min(delta.cols());
    if k == 0 || k > r {
        return Err(Error::InvalidParameter { name: "rank", detail: format!("{op}: {k} not in 1..={r}") });
    }
    Ok(())
}

/// Splits `U_k·Σ_k·V_kᵀ` as `(U_k·√Σ_k, √Σ_k·V_kᵀ)`.
fn split_truncated(w: &Matrix, k: usize) -> Result<(Matrix, Matrix)> {
    let dec = svd(w)?;
    let roots: Vec<f64> = dec.sigma[..k].iter().map(|&s| libm::sqrt(s)).collect();
    let u = Matrix::from_fn(w.rows(), k, |i, j| dec.u[(i, j)] * roots[j]);
    let v = Matrix::from_fn(k, w.cols(), |i, j| roots[i] * dec.v[(j, i)]);
    Ok((u, v))
}

/// Result of a whitened factorization with the damping that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub factor: DeltaFactor,
    pub damping: f64,
}

/// Truncation-aware SVD of `delta` (m×n) under input Gram `gram` (n×n).
pub fn truncation_aware_svd(
    delta: &Matrix,
    gram: &Matrix,
    k: usize,
    damping: f64,
    expert: usize,
    role: Role,
) -> Result<Factorization> {
    check_rank("truncation_aware_svd", delta, k)?;
    if gram.shape() != (delta.cols(), delta.cols()) {
        return Err(Error::ShapeMismatch {
            op: "truncation_aware_svd",
            detail: format!("delta {:?} with gram {:?}", delta.shape(), gram.shape()),
        });
    }
    let chol = cholesky_damped(gram, damping)?;
    let scaled = delta.matmul(&chol.factor)?;
    let (u, v_scaled) = split_truncated(&scaled, k)?;
    let v = right_solve_lower(&v_scaled, &chol.factor)?;
    Ok(Factorization { factor: DeltaFactor { u, v, rank: k, expert, role }, damping: chol.damping })
}

/// Plain truncated SVD, no activation information.
pub fn vanilla_svd_compress(delta: &Matrix, k: usize, expert: usize, role: Role) -> Result<DeltaFactor> {
    check_rank("vanilla_svd_compress", delta, k)?;
    let (u, v) = split_truncated(delta, k)?;
    Ok(DeltaFactor { u, v, rank: k, expert, role })
}

/// Whitening by `diag(‖X[j,:]‖)` (square roots of the Gram diagonal,
/// damped like the Cholesky path) instead of the full Cholesky factor.
pub fn activation_aware_svd(
    delta: &Matrix,
    gram: &Matrix,
    k: usize,
    damping: f64,
    expert: usize,
    role: Role,
) -> Result<Factorization> {
    check_rank("activation_aware_svd", delta, k)?;
    let n = delta.cols();
    if gram.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            op: "activation_aware_svd",
            detail: format!("delta {:?} with gram {:?}", delta.shape(), gram.shape()),
        });
    }
    let trace = gram.trace();
    let lambda = damping * if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let scales: Vec<f64> = (0..n).map(|j| libm::sqrt(gram[(j, j)].max(0.0) + lambda)).collect();
    if scales.contains(&0.0) {
        return Err(Error::DegenerateInput { op: "activation_aware_svd" });
    }
    let scaled = Matrix::from_fn(delta.rows(), n, |i, j| delta[(i, j)] * scales[j]);
    let (u, vs) = split_truncated(&scaled, k)?;
    let v = Matrix::from_fn(k, n, |i, j| vs[(i, j)] / scales[j]);
    Ok(Factorization { factor: DeltaFactor { u, v, rank: k, expert, role }, damping: lambda })
}

/// `√tr(E·G·Eᵀ)` for `E = ΔW − u·v`, clamped at zero.
pub fn weighted_error(delta: &Matrix, factor: &DeltaFactor, gram: &Matrix) -> Result<f64> {
    if factor.shape() != delta.shape() || gram.shape() != (delta.cols(), delta.cols()) {
        return Err(Error::ShapeMismatch {
            op: "weighted_error",
            detail: format!("delta {:?}, factor {:?}, gram {:?}", delta.shape(), factor.shape(), gram.shape()),
        });
    }
    let err = delta.sub(&factor.product())?;
    let eg = err.matmul(gram)?;
    let tr: f64 = eg.as_slice().iter().zip(err.as_slice()).map(|(a, b)| a * b).sum();
    Ok(libm::sqrt(tr.max(0.0)))
}

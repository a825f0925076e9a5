//! Diagnostics: linear CKA between weight matrices, singular-value energy
//! retention, layer sensitivity scans and budget-preserving ratio allocation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::moe::MoEModel;
use crate::pipeline::{compress_selected, evaluate, CalibrationContext, CompressionConfig, NoObserver, RuntimeModel};

/// Double-centers a symmetric Gram matrix: `H·K·H`.
fn center(k: &Matrix) -> Matrix {
    let m = k.rows();
    let mf = m as f64;
    let row_means: Vec<f64> = (0..m).map(|i| k.row(i).iter().sum::<f64>() / mf).collect();
    let col_means: Vec<f64> = (0..m).map(|j| (0..m).map(|i| k[(i, j)]).sum::<f64>() / mf).collect();
    let grand = row_means.iter().sum::<f64>() / mf;
    Matrix::from_fn(m, m, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

/// Linear CKA with rows as samples: `K = W₁W₁ᵀ`, `L = W₂W₂ᵀ`,
/// `tr(HKHL)/√(tr(HKHK)·tr(HLHL))`.
pub fn cka(w1: &Matrix, w2: &Matrix) -> Result<f64> {
    if w1.rows() != w2.rows() {
        return Err(Error::ShapeMismatch {
            op: "cka",
            detail: format!("{} rows vs {} rows", w1.rows(), w2.rows()),
        });
    }
    let kc = center(&w1.matmul(&w1.transpose())?);
    let lc = center(&w2.matmul(&w2.transpose())?);
    let frob = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>();
    let kl = frob(&kc, &lc);
    let kk = frob(&kc, &kc);
    let ll = frob(&lc, &lc);
    let denom = libm::sqrt(kk * ll);
    if !(denom > 0.0) {
        return Err(Error::DegenerateInput { op: "cka" });
    }
    Ok(kl / denom)
}

/// `Σ_{i≤k} σ_i² / Σ_i σ_i²`.
pub fn energy_retention(sigma: &[f64], k: usize) -> Result<f64> {
    if k > sigma.len() {
        return Err(Error::InvalidParameter { name: "k", detail: format!("{k} > {} singular values", sigma.len()) });
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidParameter { name: "sigma", detail: "negative or non-finite value".into() });
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(Error::DegenerateInput { op: "energy_retention" });
    }
    let kept: f64 = sigma[..k].iter().map(|s| s * s).sum();
    Ok(kept / total)
}

/// Loss increase when each layer alone is compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub baseline_loss: f64,
    pub probe_ratio: f64,
    /// One entry per layer.
    pub loss_increase: Vec<f64>,
}

/// Compresses each layer in isolation with `config` (its delta ratio is the
/// probe) and records the calibration-loss increase over the dense model.
pub fn layer_sensitivity_scan(
    model: &MoEModel,
    calib: &Matrix,
    labels: &[usize],
    config: &CompressionConfig,
) -> Result<SensitivityProfile> {
    config.validate_for(model)?;
    let ctx = CalibrationContext::prepare(model, calib, Some(labels), config, &mut NoObserver)?;
    let baseline = evaluate(&RuntimeModel::from_dense(model), calib, labels, config.batch_size)?.loss;
    let mut increase = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let out = compress_selected(model, &ctx, config, |i| i == l, &mut NoObserver)?;
        let loss = evaluate(&out.model, calib, labels, config.batch_size)?.loss;
        increase.push(loss - baseline);
    }
    Ok(SensitivityProfile { baseline_loss: baseline, probe_ratio: config.nominal_ratio(0), loss_increase: increase })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioAllocation {
    pub ratios: Vec<f64>,
    /// `budget_ratio · Σ params`.
    pub budget: f64,
    /// `Σ ratio_ℓ · params_ℓ`.
    pub allocated: f64,
}

/// Delta ratios proportional to (non-negative) sensitivity, clipped to
/// `[p_min, 1]`, scaled so the weighted parameter total equals
/// `budget_ratio · Σ params`.
///
/// The proportionality constant is located by bisection and then solved
/// exactly over the unclipped layers. Layers with zero sensitivity sit at
/// `p_min` unless the budget cannot be spent otherwise, in which case they
/// share the remainder equally.
pub fn allocate_adaptive_ratios(
    sensitivity: &[f64],
    params: &[usize],
    budget_ratio: f64,
    p_min: f64,
) -> Result<RatioAllocation> {
    if sensitivity.len() != params.len() || sensitivity.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "allocate_adaptive_ratios",
            detail: format!("{} sensitivities for {} layers", sensitivity.len(), params.len()),
        });
    }
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(Error::InvalidParameter { name: "p_min", detail: format!("{p_min} not in (0, 1]") });
    }
    if !(budget_ratio >= p_min && budget_ratio <= 1.0) {
        return Err(Error::InfeasibleBudget { requested: budget_ratio, min: p_min, max: 1.0 });
    }
    let sens: Vec<f64> = sensitivity.iter().map(|&s| if s.is_finite() { s.max(0.0) } else { 0.0 }).collect();
    let w: Vec<f64> = params.iter().map(|&p| p as f64).collect();
    let total_w: f64 = w.iter().sum();
    let budget = budget_ratio * total_w;
    let finish = |ratios: Vec<f64>| {
        let allocated = ratios.iter().zip(&w).map(|(p, w)| p * w).sum();
        Ok(RatioAllocation { ratios, budget, allocated })
    };

    if sens.iter().all(|&s| s == 0.0) {
        return finish(vec![budget_ratio; sens.len()]);
    }
    let spend = |c: f64| -> f64 { sens.iter().zip(&w).map(|(s, w)| (c * s).clamp(p_min, 1.0) * w).sum() };
    let min_pos = sens.iter().copied().filter(|&s| s > 0.0).fold(f64::INFINITY, f64::min);
    let saturate = 1.0 / min_pos;
    if spend(saturate) < budget {
        // Every sensitive layer is at 1; the insensitive ones take the rest.
        let pos_w: f64 = sens.iter().zip(&w).filter(|(s, _)| **s > 0.0).map(|(_, w)| w).sum();
        let zero_w = total_w - pos_w;
        let p0 = ((budget - pos_w) / zero_w).clamp(p_min, 1.0);
        return finish(sens.iter().map(|&s| if s > 0.0 { 1.0 } else { p0 }).collect());
    }
    let (mut lo, mut hi) = (0.0, saturate);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spend(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Exact solve over the layers that are not clipped at `hi`.
    let mut fixed = 0.0;
    let mut free = 0.0;
    for (s, wt) in sens.iter().zip(&w) {
        let v = hi * s;
        if v <= p_min || v >= 1.0 {
            fixed += v.clamp(p_min, 1.0) * wt;
        } else {
            free += s * wt;
        }
    }
    let c = if free > 0.0 { (budget - fixed) / free } else { hi };
    let ratios: Vec<f64> = sens
        .iter()
        .map(|&s| {
            let clipped_at_hi = hi * s <= p_min || hi * s >= 1.0;
            if clipped_at_hi { (hi * s).clamp(p_min, 1.0) } else { (c * s).clamp(p_min, 1.0) }
        })
        .collect();
    finish(ratios)
}

/// Stored entries added by one unit of rank across all experts and roles
/// of a layer with `n` experts of shape `hidden × d_model` / `d_model × hidden`.
pub fn rank_granule(n_experts: usize, d_model: usize, hidden: usize) -> usize {
    2 * n_experts * (d_model + hidden)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        assert!((energy_retention(&[2.0, 1.0], 1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(energy_retention(&[2.0, 1.0], 2).unwrap(), 1.0);
        assert!(energy_retention(&[0.0, 0.0], 1).is_err());
        assert!(energy_retention(&[1.0], 2).is_err());
    }

    #[test]
    fn cka_degenerate() {
        let constant = Matrix::from_fn(4, 3, |_, j| j as f64);
        let w = Matrix::from_fn(4, 3, |i, j| (i * j) as f64);
        assert!(matches!(cka(&constant, &w), Err(Error::DegenerateInput { .. })));
        assert!(cka(&w, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn uniform_and_single_layer_allocation() {
        let a = allocate_adaptive_ratios(&[2.0, 2.0, 2.0], &[10, 10, 10], 0.4, 0.1).unwrap();
        for p in &a.ratios {
            assert!((p - 0.4).abs() < 1e-12);
        }
        let a = allocate_adaptive_ratios(&[7.0], &[10], 0.3, 0.1).unwrap();
        assert!((a.ratios[0] - 0.3).abs() < 1e-12);
        let a = allocate_adaptive_ratios(&[0.0, 0.0], &[10, 20], 0.3, 0.1).unwrap();
        assert_eq!(a.ratios, vec![0.3, 0.3]);
    }

    #[test]
    fn infeasible_budget() {
        assert!(matches!(
            allocate_adaptive_ratios(&[1.0, 2.0], &[1, 1], 0.05, 0.1),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(allocate_adaptive_ratios(&[1.0, 2.0], &[1, 1], 1.2, 0.1).is_err());
    }

    #[test]
    fn zero_sensitivity_layers_absorb_leftover_budget() {
        let a = allocate_adaptive_ratios(&[1.0, 0.0], &[10, 10], 0.9, 0.1).unwrap();
        assert_eq!(a.ratios[0], 1.0);
        assert!((a.ratios[1] - 0.8).abs() < 1e-12);
        assert!((a.allocated - a.budget).abs() < 1e-9);
    }
}

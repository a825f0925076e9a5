//! Semi-dynamic structured column pruning of the shared base weight.
//!
//! Columns are scored by `C_j = ‖W_b[:,j]‖₂·‖X[j,:]‖₂`. Half of the target
//! sparsity is removed once from calibration activations; the remaining
//! quota is deactivated per forward batch among the surviving columns.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{col_l2_norms, row_l2_norms};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub total_cols: usize,
    /// Sorted original column ids removed at compression time.
    pub static_removed: Vec<usize>,
    pub sparsity: f64,
    /// Columns deactivated per batch among the kept ones.
    pub dynamic_quota: usize,
}

impl PruneMask {
    pub fn new(total_cols: usize, sparsity: f64) -> Result<Self> {
        check_sparsity(sparsity)?;
        let (stat, quota) = prune_counts(total_cols, sparsity);
        Ok(PruneMask { total_cols, static_removed: Vec::with_capacity(stat), sparsity, dynamic_quota: quota })
    }

    pub fn total_inactive(&self) -> usize {
        self.static_removed.len() + self.dynamic_quota
    }
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::InvalidParameter { name: "sparsity", detail: format!("{s} not in [0, 1)") });
    }
    Ok(())
}

// The small offset keeps products such as 100·0.29 from flooring one short.
fn floor_count(x: f64) -> usize {
    libm::floor(x + 1e-9) as usize
}

/// `(⌊n·s/2⌋, ⌊n·s⌋ − ⌊n·s/2⌋)`: static removals and per-batch quota.
pub fn prune_counts(n: usize, s: f64) -> (usize, usize) {
    let total = floor_count(n as f64 * s);
    let stat = floor_count(n as f64 * s / 2.0).min(total);
    (stat, total - stat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedBase {
    /// `m × (n − |static_removed|)`.
    pub kept: Matrix,
    /// Sorted original ids of the kept columns.
    pub kept_col_ids: Vec<usize>,
    /// Column norms of the kept columns, reused by the dynamic metric.
    pub kept_col_norms: Vec<f64>,
    pub mask: PruneMask,
}

impl PrunedBase {
    pub fn rows(&self) -> usize {
        self.kept.rows()
    }

    /// Stored entries.
    pub fn param_count(&self) -> usize {
        self.kept.len()
    }

    /// Dense `m × n` matrix with removed columns zeroed.
    pub fn to_dense(&self) -> Matrix {
        self.to_dense_active(&(0..self.kept_col_ids.len()).collect::<Vec<_>>())
    }

    /// Dense matrix keeping only the kept columns at `positions`.
    pub fn to_dense_active(&self, positions: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.kept.rows(), self.mask.total_cols);
        for &p in positions {
            let j = self.kept_col_ids[p];
            for i in 0..self.kept.rows() {
                out[(i, j)] = self.kept[(i, p)];
            }
        }
        out
    }

    /// `W_b^masked · x` for a full-width `x`, using kept positions `active`.
    pub fn apply(&self, active: &ActiveColumns, x: &[f64]) -> Vec<f64> {
        let mut y = alloc::vec![0.0; self.kept.rows()];
        for (&p, &j) in active.positions.iter().zip(&active.ids) {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += self.kept[(i, p)] * xj;
            }
        }
        y
    }

    fn select_input_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() == self.mask.total_cols {
            Ok(x.select_rows(&self.kept_col_ids))
        } else if x.rows() == self.kept_col_ids.len() {
            Ok(x.clone())
        } else {
            Err(Error::ShapeMismatch {
                op: "dynamic_mask",
                detail: format!(
                    "batch has {} rows; expected {} (full) or {} (kept)",
                    x.rows(),
                    self.mask.total_cols,
                    self.kept_col_ids.len()
                ),
            })
        }
    }
}

/// Columns active for one batch, as original ids and positions in `kept`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveColumns {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
}

impl ActiveColumns {
    pub fn all(pruned: &PrunedBase) -> Self {
        ActiveColumns {
            ids: pruned.kept_col_ids.clone(),
            positions: (0..pruned.kept_col_ids.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `C_j = ‖W_b[:,j]‖·‖X[j,:]‖` with `X` laid out features × tokens.
pub fn static_metric(w_b: &Matrix, calib_x: &Matrix) -> Result<Vec<f64>> {
    if calib_x.rows() != w_b.cols() {
        return Err(Error::ShapeMismatch {
            op: "static_metric",
            detail: format!("weight has {} columns, activations {} rows", w_b.cols(), calib_x.rows()),
        });
    }
    let wn = col_l2_norms(w_b);
    let xn = row_l2_norms(calib_x);
    Ok(wn.iter().zip(&xn).map(|(a, b)| a * b).collect())
}

/// Indices of the `count` smallest scores, ties broken toward the lower
/// key, returned in ascending key order.
fn lowest(scores: &[f64], keys: &[usize], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a].partial_cmp(&scores[b]).unwrap_or(core::cmp::Ordering::Equal).then(keys[a].cmp(&keys[b]))
    });
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Removes the `⌊n·s/2⌋` lowest-scoring columns.
pub fn static_prune(w_b: &Matrix, metric: &[f64], s: f64) -> Result<PrunedBase> {
    let n = w_b.cols();
    if metric.len() != n {
        return Err(Error::ShapeMismatch {
            op: "static_prune",
            detail: format!("{} scores for {n} columns", metric.len()),
        });
    }
    let mut mask = PruneMask::new(n, s)?;
    let (stat, _) = prune_counts(n, s);
    let ids: Vec<usize> = (0..n).collect();
    mask.static_removed = lowest(metric, &ids, stat);
    let kept_col_ids: Vec<usize> = (0..n).filter(|j| mask.static_removed.binary_search(j).is_err()).collect();
    let kept = w_b.select_cols(&kept_col_ids);
    let kept_col_norms = col_l2_norms(&kept);
    Ok(PrunedBase { kept, kept_col_ids, kept_col_norms, mask })
}

/// Per-batch metric over the kept columns.
pub fn dynamic_metric(pruned: &PrunedBase, x_batch: &Matrix) -> Result<Vec<f64>> {
    let x = pruned.select_input_rows(x_batch)?;
    let xn = row_l2_norms(&x);
    Ok(pruned.kept_col_norms.iter().zip(&xn).map(|(a, b)| a * b).collect())
}

/// Deactivates the `dynamic_quota` lowest-scoring kept columns for this batch.
///
/// `x_batch` may carry either all `total_cols` input rows or only the rows
/// of the kept columns.
pub fn dynamic_mask(pruned: &PrunedBase, x_batch: &Matrix) -> Result<ActiveColumns> {
    let quota = pruned.mask.dynamic_quota;
    if quota == 0 {
        pruned.select_input_rows(x_batch)?;
        return Ok(ActiveColumns::all(pruned));
    }
    let metric = dynamic_metric(pruned, x_batch)?;
    let off = lowest(&metric, &pruned.kept_col_ids, quota);
    let positions: Vec<usize> = (0..pruned.kept_col_ids.len()).filter(|p| off.binary_search(p).is_err()).collect();
    let ids = positions.iter().map(|&p| pruned.kept_col_ids[p]).collect();
    Ok(ActiveColumns { ids, positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn hand_metric() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]);
        let x = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let c = static_metric(&w, &x).unwrap();
        assert!((c[0] - 5.0 * libm::sqrt(2.0)).abs() < 1e-14);
        assert_eq!(c[1], 0.0);
        assert_eq!(static_metric(&w, &Matrix::zeros(2, 3)).unwrap(), vec![0.0, 0.0]);
        assert!(static_metric(&w, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0]]);
        let p = static_prune(&w, &[3.0, 2.0, 1.0], 0.0).unwrap();
        assert_eq!(p.kept, w);
        assert_eq!(p.mask.dynamic_quota, 0);
        let a = dynamic_mask(&p, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(a.ids, vec![0, 1, 2]);
    }

    #[test]
    fn floor_split() {
        let w = Matrix::from_fn(2, 10, |i, j| (i + j) as f64 + 1.0);
        let metric: Vec<f64> = (0..10).map(|j| 10.0 - j as f64).collect();
        let p = static_prune(&w, &metric, 0.4).unwrap();
        assert_eq!(p.mask.static_removed, vec![8, 9]);
        assert_eq!(p.mask.dynamic_quota, 2);
        assert_eq!(prune_counts(100, 0.29), (14, 15));
        assert!(static_prune(&w, &metric, 1.0).is_err());
        assert!(static_prune(&w, &metric, -0.1).is_err());
    }

    #[test]
    fn zero_input_row_deactivated_first() {
        let w = Matrix::from_fn(3, 6, |_, _| 1.0);
        let p = static_prune(&w, &[1.0; 6], 0.4).unwrap();
        // 6·0.4 = 2.4: one static removal (column 0 by tie rule), one dynamic.
        assert_eq!(p.mask.static_removed, vec![0]);
        assert_eq!(p.mask.dynamic_quota, 1);
        let mut x = Matrix::from_fn(6, 4, |_, _| 1.0);
        for t in 0..4 {
            x[(4, t)] = 0.0;
        }
        let a = dynamic_mask(&p, &x).unwrap();
        assert_eq!(a.ids, vec![1, 2, 3, 5]);
        let kept_rows = x.select_rows(&p.kept_col_ids);
        assert_eq!(dynamic_mask(&p, &kept_rows).unwrap(), a);
        assert!(dynamic_mask(&p, &Matrix::zeros(4, 1)).is_err());
    }
}

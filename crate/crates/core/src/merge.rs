//! Shared base weight construction and delta extraction.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Denominator guard for Fisher-weighted averaging.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMethod {
    FisherElementwise,
    FisherScalar,
    Mean,
    Frequency,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] =
        [MergeMethod::FisherElementwise, MergeMethod::FisherScalar, MergeMethod::Mean, MergeMethod::Frequency];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::FisherElementwise => "fisher",
            MergeMethod::FisherScalar => "fisher-scalar",
            MergeMethod::Mean => "mean",
            MergeMethod::Frequency => "frequency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fisher" | "fisher-elementwise" => Some(MergeMethod::FisherElementwise),
            "fisher-scalar" => Some(MergeMethod::FisherScalar),
            "mean" => Some(MergeMethod::Mean),
            "frequency" => Some(MergeMethod::Frequency),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Experts that contribute to the base; `None` means all of them.
    pub expert_subset: Option<Vec<usize>>,
    pub epsilon: f64,
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        MergeSpec { method, expert_subset: None, epsilon: DEFAULT_EPSILON }
    }

    /// Resolved subset for `n` experts, validated.
    pub fn subset(&self, n: usize) -> Result<Vec<usize>> {
        match &self.expert_subset {
            None => Ok((0..n).collect()),
            Some(s) => {
                if s.is_empty() {
                    return Err(Error::InvalidParameter { name: "expert_subset", detail: "empty".into() });
                }
                if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                    return Err(Error::InvalidParameter {
                        name: "expert_subset",
                        detail: format!("index {bad} out of range for {n} experts"),
                    });
                }
                let mut sorted = s.clone();
                sorted.sort_unstable();
                sorted.dedup();
                Ok(sorted)
            }
        }
    }
}

/// Base weight plus the number of entries that fell back to the plain mean
/// because every expert had zero Fisher information there.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub base: Matrix,
    pub fallback_entries: usize,
}

fn check_shapes(op: &'static str, weights: &[&Matrix]) -> Result<(usize, usize)> {
    let first = weights
        .first()
        .ok_or(Error::InvalidParameter { name: "weights", detail: format!("{op}: no experts") })?;
    let shape = first.shape();
    for (i, w) in weights.iter().enumerate() {
        if w.shape() != shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expert {i} is {:?}, expected {shape:?}", w.shape()),
            });
        }
    }
    Ok(shape)
}

/// Writes the shared value into every entry on which all experts agree, so
/// identical experts merge to themselves without rounding.
fn keep_agreement(out: &mut Matrix, weights: &[&Matrix]) {
    for idx in 0..out.len() {
        let w0 = weights[0].as_slice()[idx];
        if weights.iter().all(|w| w.as_slice()[idx] == w0) {
            out.as_mut_slice()[idx] = w0;
        }
    }
}

/// `(1/K)·Σ W_i`, summed in expert order then divided.
pub fn mean_merge(weights: &[&Matrix]) -> Result<Matrix> {
    let (r, c) = check_shapes("mean_merge", weights)?;
    let k = weights.len() as f64;
    let mut out = Matrix::zeros(r, c);
    for w in weights {
        out.axpy(1.0, w);
    }
    let mut out = out.map(|v| v / k);
    keep_agreement(&mut out, weights);
    Ok(out)
}

/// `Σ freq_i·W_i`.
pub fn frequency_merge(weights: &[&Matrix], freq: &[f64]) -> Result<Matrix> {
    let (r, c) = check_shapes("frequency_merge", weights)?;
    if freq.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "frequency_merge",
            detail: format!("{} frequencies for {} experts", freq.len(), weights.len()),
        });
    }
    if freq.iter().any(|f| !(*f >= 0.0)) || (freq.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter {
            name: "frequency",
            detail: "frequencies must be non-negative and sum to 1".into(),
        });
    }
    let mut out = Matrix::zeros(r, c);
    for (w, &f) in weights.iter().zip(freq) {
        out.axpy(f, w);
    }
    keep_agreement(&mut out, weights);
    Ok(out)
}

/// Elementwise Fisher-weighted average `Σ F_i⊙W_i / (Σ F_i + ε)`.
///
/// Entries where all experts carry the same Fisher value are the plain mean
/// (computed by the mean formula, so equal Fisher reproduces
/// [`mean_merge`] exactly); an all-zero entry counts as a fallback. Entries
/// on which all experts agree keep that value.
pub fn fisher_merge(weights: &[&Matrix], fisher: &[&Matrix], epsilon: f64) -> Result<MergeOutcome> {
    let (r, c) = check_shapes("fisher_merge", weights)?;
    if fisher.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "fisher_merge",
            detail: format!("{} fisher blocks for {} experts", fisher.len(), weights.len()),
        });
    }
    for (i, f) in fisher.iter().enumerate() {
        if f.shape() != (r, c) {
            return Err(Error::ShapeMismatch {
                op: "fisher_merge",
                detail: format!("fisher {i} is {:?}, expected {:?}", f.shape(), (r, c)),
            });
        }
        if f.as_slice().iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter { name: "fisher", detail: format!("expert {i} has negative entries") });
        }
    }
    let k = weights.len() as f64;
    let mut base = Matrix::zeros(r, c);
    let mut fallback = 0;
    for idx in 0..r * c {
        let f0 = fisher[0].as_slice()[idx];
        let uniform = fisher.iter().all(|f| f.as_slice()[idx] == f0);
        let value = if uniform {
            if f0 == 0.0 {
                fallback += 1;
            }
            weights.iter().map(|w| w.as_slice()[idx]).sum::<f64>() / k
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            for (w, f) in weights.iter().zip(fisher) {
                let fv = f.as_slice()[idx];
                num += fv * w.as_slice()[idx];
                den += fv;
            }
            num / (den + epsilon)
        };
        base.as_mut_slice()[idx] = value;
    }
    keep_agreement(&mut base, weights);
    Ok(MergeOutcome { base, fallback_entries: fallback })
}

/// Fisher merge with one scalar importance per expert.
pub fn fisher_merge_scalar(weights: &[&Matrix], fisher: &[f64], epsilon: f64) -> Result<MergeOutcome> {
    let (r, c) = check_shapes("fisher_merge_scalar", weights)?;
    let blocks: Vec<Matrix> = fisher.iter().map(|&f| Matrix::from_fn(r, c, |_, _| f)).collect();
    let refs: Vec<&Matrix> = blocks.iter().collect();
    fisher_merge(weights, &refs, epsilon)
}

/// `ΔW_i = W_i − W_b` for every expert.
pub fn compute_deltas(weights: &[&Matrix], base: &Matrix) -> Result<Vec<Matrix>> {
    weights.iter().map(|w| w.sub(base)).collect()
}

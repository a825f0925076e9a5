//! Compressed forward pass and parameter accounting.
//!
//! A compressed expert is `Ŵ_i = W_b^masked + ΔU_i·ΔV_i` per role. The
//! forward never materializes `Ŵ_i`: the Up base product is shared by all
//! selected experts of a token, and since the gate weights sum to one the
//! Down base is applied once to the gate-weighted hidden mixture.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::factorize::DeltaFactor;
use crate::matrix::Matrix;
use crate::moe::{route, silu, MoELayer, Role, RoutingTrace};
use crate::prune::{dynamic_mask, prune_counts, ActiveColumns, PrunedBase};

/// Pruned base and per-expert factors for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleCompression {
    pub base: PrunedBase,
    /// `None` for trimmed experts.
    pub factors: Vec<Option<DeltaFactor>>,
}

impl RoleCompression {
    /// Dense shape of the role's weights.
    pub fn shape(&self) -> (usize, usize) {
        (self.base.rows(), self.base.mask.total_cols)
    }

    pub fn stored_params(&self) -> usize {
        self.base.param_count() + self.factors.iter().flatten().map(DeltaFactor::param_count).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub gate: Matrix,
    pub top_k: usize,
    pub up: RoleCompression,
    pub down: RoleCompression,
    /// Sorted ids of experts whose deltas were dropped.
    pub trimmed: Vec<usize>,
}

impl CompressedLayer {
    pub fn validate(&self) -> Result<()> {
        let n = self.gate.rows();
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidParameter { name: "top_k", detail: format!("{} not in 1..={n}", self.top_k) });
        }
        let d = self.gate.cols();
        let (h, ud) = self.up.shape();
        if ud != d || self.down.shape() != (d, h) {
            return Err(Error::ShapeMismatch {
                op: "compressed_layer",
                detail: format!("up {:?}, down {:?}, d_model {d}", self.up.shape(), self.down.shape()),
            });
        }
        for role in Role::ALL {
            let rc = self.role(role);
            if rc.factors.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "compressed_layer",
                    detail: format!("{} {} factors for {n} experts", rc.factors.len(), role.name()),
                });
            }
            for (i, f) in rc.factors.iter().enumerate() {
                let trimmed = self.trimmed.binary_search(&i).is_ok();
                match f {
                    Some(f) if trimmed => {
                        return Err(Error::Invariant(format!("trimmed expert {i} still has a {} factor", f.role.name())))
                    }
                    Some(f) if f.shape() != rc.shape() => {
                        return Err(Error::ShapeMismatch {
                            op: "compressed_layer",
                            detail: format!("expert {i} {} factor {:?} vs {:?}", role.name(), f.shape(), rc.shape()),
                        })
                    }
                    None if !trimmed => {
                        return Err(Error::Invariant(format!("expert {i} lacks a {} factor", role.name())))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn role(&self, role: Role) -> &RoleCompression {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.gate.rows()
    }

    pub fn d_model(&self) -> usize {
        self.gate.cols()
    }

    pub fn hidden(&self) -> usize {
        self.up.base.rows()
    }

    /// Dense per-expert parameter count `m` (Up plus Down entries).
    pub fn expert_params(&self) -> usize {
        2 * self.d_model() * self.hidden()
    }

    fn factor(&self, role: Role, expert: usize) -> Result<Option<&DeltaFactor>> {
        let f = self.role(role).factors.get(expert).ok_or_else(|| {
            Error::Invariant(format!("expert {expert} out of range for {} experts", self.n_experts()))
        })?;
        if f.is_none() && self.trimmed.binary_search(&expert).is_err() {
            return Err(Error::Invariant(format!("expert {expert} has no {} factor", role.name())));
        }
        Ok(f.as_ref())
    }

    /// Materializes `Ŵ_i` for both roles under the given masks, as a dense layer.
    pub fn materialize(&self, masks: &LayerMasks) -> Result<MoELayer> {
        let base_up = self.up.base.to_dense_active(&masks.up.positions);
        let base_down = self.down.base.to_dense_active(&masks.down.positions);
        let mut experts = Vec::with_capacity(self.n_experts());
        for i in 0..self.n_experts() {
            let mut up = base_up.clone();
            let mut down = base_down.clone();
            if let Some(f) = self.factor(Role::Up, i)? {
                up = up.add(&f.product())?;
            }
            if let Some(f) = self.factor(Role::Down, i)? {
                down = down.add(&f.product())?;
            }
            experts.push(crate::moe::Expert { up, down });
        }
        MoELayer::new(self.gate.clone(), experts, self.top_k)
    }
}

/// Active base columns of one batch, per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMasks {
    pub up: ActiveColumns,
    pub down: ActiveColumns,
}

impl LayerMasks {
    pub fn get(&self, role: Role) -> &ActiveColumns {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub y: Matrix,
    pub trace: RoutingTrace,
    pub masks: LayerMasks,
}

/// Forward of one compressed layer over a `d_model × T` batch.
pub fn compressed_forward(layer: &CompressedLayer, x_batch: &Matrix) -> Result<LayerOutput> {
    let (d, h) = (layer.d_model(), layer.hidden());
    if x_batch.rows() != d {
        return Err(Error::ShapeMismatch {
            op: "compressed_forward",
            detail: format!("batch has {} rows, d_model is {d}", x_batch.rows()),
        });
    }
    let t = x_batch.cols();
    let up_active = dynamic_mask(&layer.up.base, x_batch)?;

    let mut trace = RoutingTrace::new(layer.n_experts());
    let mut hidden: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t);
    let mut mixed = Matrix::zeros(h, t);
    for j in 0..t {
        let x = x_batch.col(j);
        let routing = route(&layer.gate, layer.top_k, &x);
        let shared = layer.up.base.apply(&up_active, &x);
        let mut z = vec![0.0; h];
        let mut per_expert = Vec::with_capacity(routing.experts.len());
        for (&i, &w) in routing.experts.iter().zip(&routing.weights) {
            let mut pre = shared.clone();
            if let Some(f) = layer.factor(Role::Up, i)? {
                for (p, v) in pre.iter_mut().zip(f.apply(&x)) {
                    *p += v;
                }
            }
            let hid: Vec<f64> = pre.into_iter().map(silu).collect();
            for (a, b) in z.iter_mut().zip(&hid) {
                *a += w * b;
            }
            per_expert.push(hid);
        }
        mixed.set_col(j, &z);
        hidden.push(per_expert);
        trace.push(routing);
    }

    let down_active = dynamic_mask(&layer.down.base, &mixed)?;
    let mut y = Matrix::zeros(d, t);
    for j in 0..t {
        let mut out = layer.down.base.apply(&down_active, &mixed.col(j));
        let routing = &trace.tokens[j];
        for ((&i, &w), hid) in routing.experts.iter().zip(&routing.weights).zip(&hidden[j]) {
            if let Some(f) = layer.factor(Role::Down, i)? {
                for (o, v) in out.iter_mut().zip(f.apply(hid)) {
                    *o += w * v;
                }
            }
        }
        y.set_col(j, &out);
    }
    Ok(LayerOutput { y, trace, masks: LayerMasks { up: up_active, down: down_active } })
}

/// Drops the delta factors of the `t` least frequently routed experts
/// (ties: lower index first). Routing is untouched.
pub fn trim_deltas(layer: &CompressedLayer, freq: &[f64], t: usize) -> Result<CompressedLayer> {
    let n = layer.n_experts();
    if freq.len() != n {
        return Err(Error::ShapeMismatch { op: "trim_deltas", detail: format!("{} frequencies for {n} experts", freq.len()) });
    }
    if t > n {
        return Err(Error::InvalidParameter { name: "trim", detail: format!("{t} > {n} experts") });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| freq[a].partial_cmp(&freq[b]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = layer.clone();
    for &i in &order[..t] {
        out.up.factors[i] = None;
        out.down.factors[i] = None;
        if let Err(pos) = out.trimmed.binary_search(&i) {
            out.trimmed.insert(pos, i);
        }
    }
    Ok(out)
}

/// Storage counts for `n` experts of `m` parameters each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticCounts {
    /// `n·m`.
    pub original: f64,
    /// `(n+1)·m`: experts as base plus full deltas.
    pub decomposed: f64,
    /// `n·p·m`.
    pub factors: f64,
    /// `(1 − s/2)·m`.
    pub base: f64,
    pub compressed: f64,
    /// `(n·p + s/2)·m` as printed in the method's accounting.
    pub literal: f64,
}

pub fn static_param_count(n: usize, m: usize, p: f64, s: f64) -> StaticCounts {
    let (n, m) = (n as f64, m as f64);
    let factors = n * p * m;
    let base = (1.0 - s / 2.0) * m;
    StaticCounts {
        original: n * m,
        decomposed: (n + 1.0) * m,
        factors,
        base,
        compressed: factors + base,
        literal: (n * p + s / 2.0) * m,
    }
}

/// Per-token active multiply-weights with `k_top` experts selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveCounts {
    /// `k·m`.
    pub original: f64,
    /// `k·p·m`.
    pub factors: f64,
    /// `(1 − s)·m`.
    pub base: f64,
    pub compressed: f64,
    /// `(k·p + s)·m` as printed in the method's accounting.
    pub literal: f64,
}

pub fn active_param_count(k_top: usize, m: usize, p: f64, s: f64) -> ActiveCounts {
    let (k, m) = (k_top as f64, m as f64);
    let factors = k * p * m;
    let base = (1.0 - s) * m;
    ActiveCounts { original: k * m, factors, base, compressed: factors + base, literal: (k * p + s) * m }
}

/// Entries actually stored by a compressed layer (bases plus factors).
pub fn census_static(layer: &CompressedLayer) -> usize {
    layer.up.stored_params() + layer.down.stored_params()
}

/// Multiply-weights touched over a whole batch: active base columns for
/// every token plus the factors of each token's selected, untrimmed experts.
pub fn census_active(layer: &CompressedLayer, out: &LayerOutput) -> usize {
    let base_per_token: usize = Role::ALL
        .iter()
        .map(|&r| layer.role(r).base.rows() * out.masks.get(r).len())
        .sum();
    let mut total = base_per_token * out.trace.tokens.len();
    for routing in &out.trace.tokens {
        for &i in &routing.experts {
            for r in Role::ALL {
                if let Some(f) = &layer.role(r).factors[i] {
                    total += f.param_count();
                }
            }
        }
    }
    total
}

/// Parameter accounting for one layer.
///
/// `p` and `s` are the nominal settings. The closed-form counts use the
/// realized ratios (rank rounding, floor of pruned columns), which makes
/// them agree with the entry census exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub n: usize,
    pub m: usize,
    pub k_top: usize,
    pub p: f64,
    pub s: f64,
    pub p_realized: f64,
    pub s_realized_static: f64,
    pub s_realized_active: f64,
    pub original_static: f64,
    pub compressed_static: f64,
    pub original_active: f64,
    pub compressed_active: f64,
    pub literal_static: f64,
    pub literal_active: f64,
    pub census_static: usize,
    /// The printed storage/activation expressions disagree with the census-consistent ones.
    pub literal_discrepancy: bool,
}

impl ParamReport {
    pub fn for_layer(layer: &CompressedLayer, p: f64, s: f64) -> ParamReport {
        let n = layer.n_experts();
        let m = layer.expert_params();
        let mf = m as f64;
        let factor_total: usize = Role::ALL
            .iter()
            .map(|&r| layer.role(r).factors.iter().flatten().map(DeltaFactor::param_count).sum::<usize>())
            .sum();
        let p_realized = factor_total as f64 / (n as f64 * mf);
        let base_stored: usize = Role::ALL.iter().map(|&r| layer.role(r).base.param_count()).sum();
        let s_static = 2.0 * (1.0 - base_stored as f64 / mf);
        let base_active: usize = Role::ALL
            .iter()
            .map(|&r| {
                let b = &layer.role(r).base;
                let (stat, quota) = prune_counts(b.mask.total_cols, b.mask.sparsity);
                b.rows() * (b.mask.total_cols - stat - quota)
            })
            .sum();
        let s_active = 1.0 - base_active as f64 / mf;
        let st = static_param_count(n, m, p_realized, s_static);
        let ac = active_param_count(layer.top_k, m, p_realized, s_active);
        let st_nominal = static_param_count(n, m, p, s);
        let ac_nominal = active_param_count(layer.top_k, m, p, s);
        let literal_discrepancy = (st_nominal.literal - st_nominal.compressed).abs() > 1e-9 * mf
            || (ac_nominal.literal - ac_nominal.compressed).abs() > 1e-9 * mf;
        ParamReport {
            n,
            m,
            k_top: layer.top_k,
            p,
            s,
            p_realized,
            s_realized_static: s_static,
            s_realized_active: s_active,
            original_static: st.original,
            compressed_static: st.compressed,
            original_active: ac.original,
            compressed_active: ac.compressed,
            literal_static: st_nominal.literal,
            literal_active: ac_nominal.literal,
            census_static: census_static(layer),
            literal_discrepancy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_formula_examples() {
        let c = static_param_count(8, 100, 0.5, 0.2);
        assert_eq!(c.factors, 400.0);
        assert_eq!(c.base, 90.0);
        assert_eq!(c.compressed, 490.0);
        assert!((c.literal - 410.0).abs() < 1e-12);
        let c = static_param_count(8, 100, 1.0, 0.0);
        assert_eq!(c.compressed, c.decomposed);
        assert_eq!(c.decomposed, 900.0);
    }

    #[test]
    fn active_formula_examples() {
        let a = active_param_count(2, 100, 0.5, 0.2);
        assert_eq!(a.factors, 100.0);
        assert_eq!(a.base, 80.0);
        assert_eq!(a.compressed, 180.0);
        assert!((a.literal - 120.0).abs() < 1e-12);
        let a = active_param_count(2, 100, 1.0, 0.0);
        assert_eq!(a.compressed, 300.0);
    }
}

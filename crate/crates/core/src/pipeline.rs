//! End-to-end compression: calibration capture, Fisher estimation, merge,
//! delta factorization, static pruning, packaging and trimming; plus the
//! mixed dense/compressed runtime model and its evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result, Stage};
use crate::factorize::{
    activation_aware_svd, truncation_aware_svd, vanilla_svd_compress, weighted_error, RankPolicy, SvdMethod,
};
use crate::grad::{fisher_accumulate, log_softmax_at, FisherInfo, FisherMode};
use crate::linalg::DEFAULT_DAMPING;
use crate::matrix::Matrix;
use crate::merge::{
    compute_deltas, fisher_merge, fisher_merge_scalar, frequency_merge, mean_merge, MergeMethod, MergeOutcome,
    DEFAULT_EPSILON,
};
use crate::moe::{capture_calibration, expert_frequency, Expert, LayerCalibration, MoELayer, MoEModel, Role, RoutingTrace};
use crate::prune::{static_metric, static_prune};
use crate::runtime::{compressed_forward, trim_deltas, CompressedLayer, LayerMasks, ParamReport, RoleCompression};

pub const DEFAULT_CALIB_SAMPLES: usize = 512;
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// All knobs of a compression run. Validate before use.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    pub merge: MergeMethod,
    pub fisher_mode: FisherMode,
    pub fisher_seed: u64,
    pub calib_samples: usize,
    pub batch_size: usize,
    pub rank_policy: RankPolicy,
    /// Per-layer delta ratios overriding a global `Ratio` policy.
    pub layer_ratios: Option<Vec<f64>>,
    pub svd: SvdMethod,
    pub sparsity: f64,
    pub trim: usize,
    pub damping: f64,
    pub epsilon: f64,
    pub expert_subset: Option<Vec<usize>>,
    /// Allowed relative deviation when checking lossless reproductions.
    pub tolerance: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            merge: MergeMethod::FisherElementwise,
            fisher_mode: FisherMode::SampledLabel,
            fisher_seed: 0,
            calib_samples: DEFAULT_CALIB_SAMPLES,
            batch_size: DEFAULT_BATCH_SIZE,
            rank_policy: RankPolicy::Ratio(0.5),
            layer_ratios: None,
            svd: SvdMethod::TruncationAware,
            sparsity: 0.0,
            trim: 0,
            damping: DEFAULT_DAMPING,
            epsilon: DEFAULT_EPSILON,
            expert_subset: None,
            tolerance: 1e-7,
        }
    }
}

impl CompressionConfig {
    /// Light base pruning (10% of base columns).
    pub fn performance() -> Self {
        CompressionConfig { sparsity: 0.1, ..Default::default() }
    }

    /// Heavy base pruning (60% of base columns).
    pub fn throughput() -> Self {
        CompressionConfig { sparsity: 0.6, ..Default::default() }
    }

    /// Full-rank factors, no pruning, no trimming.
    pub fn lossless() -> Self {
        CompressionConfig { rank_policy: RankPolicy::Lossless, sparsity: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.rank_policy.validate()?;
        let bad = |name, detail: alloc::string::String| Err(Error::InvalidParameter { name, detail });
        if self.calib_samples == 0 {
            return bad("calib_samples", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad("sparsity", format!("{} not in [0, 1)", self.sparsity));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping", format!("{} must be finite and >= 0", self.damping));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", format!("{} must be finite and > 0", self.epsilon));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance", format!("{} must be finite and > 0", self.tolerance));
        }
        if let Some(r) = &self.layer_ratios {
            if let Some(p) = r.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return bad("layer_ratios", format!("{p} not in (0, 1]"));
            }
        }
        if let Some(s) = &self.expert_subset {
            if s.is_empty() {
                return bad("expert_subset", "empty".into());
            }
        }
        Ok(())
    }

    /// Validation against a concrete model.
    pub fn validate_for(&self, model: &MoEModel) -> Result<()> {
        self.validate()?;
        if let Some(r) = &self.layer_ratios {
            if r.len() != model.layers.len() {
                return Err(Error::InvalidParameter {
                    name: "layer_ratios",
                    detail: format!("{} ratios for {} layers", r.len(), model.layers.len()),
                });
            }
        }
        for (l, layer) in model.layers.iter().enumerate() {
            if self.trim > layer.n_experts() {
                return Err(Error::InvalidParameter {
                    name: "trim",
                    detail: format!("{} > {} experts in layer {l}", self.trim, layer.n_experts()),
                });
            }
            if let Some(s) = &self.expert_subset {
                if let Some(bad) = s.iter().find(|&&i| i >= layer.n_experts()) {
                    return Err(Error::InvalidParameter {
                        name: "expert_subset",
                        detail: format!("index {bad} out of range in layer {l}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn needs_fisher(&self) -> bool {
        matches!(self.merge, MergeMethod::FisherElementwise | MergeMethod::FisherScalar)
    }

    /// Rank policy for layer `l`.
    pub fn policy_for(&self, l: usize) -> RankPolicy {
        match (&self.layer_ratios, self.rank_policy) {
            (Some(r), RankPolicy::Ratio(_)) => RankPolicy::Ratio(r[l]),
            _ => self.rank_policy,
        }
    }

    /// Nominal delta ratio for reporting.
    pub fn nominal_ratio(&self, l: usize) -> f64 {
        match self.policy_for(l) {
            RankPolicy::Ratio(p) => p,
            _ => 1.0,
        }
    }
}

/// Hooks for timing or logging stages.
pub trait StageObserver {
    fn begin(&mut self, _stage: Stage, _layer: Option<usize>) {}
    fn end(&mut self, _stage: Stage, _layer: Option<usize>) {}
}

/// Observer that does nothing.
pub struct NoObserver;
impl StageObserver for NoObserver {}

fn staged<T>(
    obs: &mut dyn StageObserver,
    stage: Stage,
    layer: Option<usize>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    obs.begin(stage, layer);
    let out = f();
    obs.end(stage, layer);
    out
}

/// Calibration statistics shared by all layer compressions.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationContext {
    pub layers: Vec<LayerCalibration>,
    pub fisher: Option<FisherInfo>,
}

/// The first `n` columns (tokens) of `m`.
pub fn first_tokens(m: &Matrix, n: usize) -> Matrix {
    let n = n.min(m.cols());
    Matrix::from_fn(m.rows(), n, |i, j| m[(i, j)])
}

impl CalibrationContext {
    pub fn prepare(
        model: &MoEModel,
        calib: &Matrix,
        labels: Option<&[usize]>,
        config: &CompressionConfig,
        obs: &mut dyn StageObserver,
    ) -> Result<Self> {
        let tokens = first_tokens(calib, config.calib_samples);
        let labels = labels.map(|l| &l[..tokens.cols().min(l.len())]);
        let layers = staged(obs, Stage::Calibration, None, || {
            capture_calibration(model, &tokens).map_err(|e| e.at(Stage::Calibration, None, None))
        })?;
        let fisher = if config.needs_fisher() {
            Some(staged(obs, Stage::Fisher, None, || {
                fisher_accumulate(model, &tokens, labels, config.fisher_mode, config.fisher_seed)
                    .map_err(|e| e.at(Stage::Fisher, None, None))
            })?)
        } else {
            None
        };
        Ok(CalibrationContext { layers, fisher })
    }
}

/// Quality record of one expert's factorization for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRecord {
    pub expert: usize,
    pub role: Role,
    pub rank: usize,
    /// `‖(ΔW − ΔU·ΔV)·X‖_F`.
    pub weighted_error: f64,
    /// `‖ΔW·X‖_F`, the error of dropping the delta entirely.
    pub weighted_norm: f64,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub layer: usize,
    pub params: ParamReport,
    pub factors: Vec<FactorRecord>,
    /// Base entries that fell back to the plain mean, per role (Up, Down).
    pub merge_fallback: [usize; 2],
    pub trimmed: Vec<usize>,
    pub frequency: Vec<f64>,
}

fn merge_role(
    method: MergeMethod,
    layer_idx: usize,
    layer: &MoELayer,
    role: Role,
    subset: &[usize],
    freq: &[f64],
    fisher: Option<&FisherInfo>,
    epsilon: f64,
) -> Result<MergeOutcome> {
    let weights: Vec<&Matrix> = subset.iter().map(|&i| layer.experts[i].weight(role)).collect();
    let need_fisher = || {
        fisher.ok_or(Error::InvalidParameter { name: "fisher", detail: "fisher merge without fisher information".into() })
    };
    match method {
        MergeMethod::Mean => Ok(MergeOutcome { base: mean_merge(&weights)?, fallback_entries: 0 }),
        MergeMethod::Frequency => {
            let sub: Vec<f64> = subset.iter().map(|&i| freq[i]).collect();
            let total: f64 = sub.iter().sum();
            let norm: Vec<f64> = if total > 0.0 {
                sub.iter().map(|f| f / total).collect()
            } else {
                vec![1.0 / sub.len() as f64; sub.len()]
            };
            Ok(MergeOutcome { base: frequency_merge(&weights, &norm)?, fallback_entries: 0 })
        }
        MergeMethod::FisherElementwise => {
            let f = need_fisher()?;
            let blocks: Vec<&Matrix> = subset.iter().map(|&i| f.get(layer_idx, i, role)).collect();
            fisher_merge(&weights, &blocks, epsilon)
        }
        MergeMethod::FisherScalar => {
            let f = need_fisher()?;
            let scalars: Vec<f64> = subset.iter().map(|&i| f.scalar(layer_idx, i, role)).collect();
            fisher_merge_scalar(&weights, &scalars, epsilon)
        }
    }
}

/// Compresses one layer from its calibration statistics.
pub fn compress_layer(
    layer_idx: usize,
    layer: &MoELayer,
    calib: &LayerCalibration,
    fisher: Option<&FisherInfo>,
    config: &CompressionConfig,
    obs: &mut dyn StageObserver,
) -> Result<(CompressedLayer, LayerSummary)> {
    let n = layer.n_experts();
    let at = |stage: Stage, expert: Option<usize>| move |e: Error| e.at(stage, Some(layer_idx), expert);
    let subset = match &config.expert_subset {
        Some(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            s
        }
        None => (0..n).collect(),
    };
    let freq = expert_frequency(&calib.trace);
    let policy = config.policy_for(layer_idx);

    let mut roles: Vec<RoleCompression> = Vec::with_capacity(2);
    let mut records = Vec::with_capacity(2 * n);
    let mut fallback = [0usize; 2];
    for (ri, role) in Role::ALL.into_iter().enumerate() {
        let merged = staged(obs, Stage::Merge, Some(layer_idx), || {
            merge_role(config.merge, layer_idx, layer, role, &subset, &freq, fisher, config.epsilon)
                .map_err(at(Stage::Merge, None))
        })?;
        fallback[ri] = merged.fallback_entries;
        let base = merged.base;

        let deltas = staged(obs, Stage::Deltas, Some(layer_idx), || {
            let weights: Vec<&Matrix> = layer.experts.iter().map(|e| e.weight(role)).collect();
            compute_deltas(&weights, &base).map_err(at(Stage::Deltas, None))
        })?;

        let mut factors = Vec::with_capacity(n);
        obs.begin(Stage::Factorize, Some(layer_idx));
        for (i, delta) in deltas.iter().enumerate() {
            let gram = calib.grams[i].gram(role);
            let k = policy.rank(delta.rows(), delta.cols());
            let fac = match config.svd {
                SvdMethod::TruncationAware => {
                    truncation_aware_svd(delta, gram, k, config.damping, i, role).map(|f| (f.factor, f.damping))
                }
                SvdMethod::ActivationAware => {
                    activation_aware_svd(delta, gram, k, config.damping, i, role).map(|f| (f.factor, f.damping))
                }
                SvdMethod::Vanilla => vanilla_svd_compress(delta, k, i, role).map(|f| (f, 0.0)),
            };
            let (factor, damping) = match fac {
                Ok(v) => v,
                Err(e) => {
                    obs.end(Stage::Factorize, Some(layer_idx));
                    return Err(at(Stage::Factorize, Some(i))(e));
                }
            };
            let werr = weighted_error(delta, &factor, gram).map_err(at(Stage::Factorize, Some(i)))?;
            let wnorm = weighted_norm(delta, gram);
            records.push(FactorRecord { expert: i, role, rank: k, weighted_error: werr, weighted_norm: wnorm, damping });
            factors.push(Some(factor));
        }
        obs.end(Stage::Factorize, Some(layer_idx));

        let pruned = staged(obs, Stage::Prune, Some(layer_idx), || {
            let metric = static_metric(&base, calib.base_inputs(role)).map_err(at(Stage::Prune, None))?;
            static_prune(&base, &metric, config.sparsity).map_err(at(Stage::Prune, None))
        })?;
        roles.push(RoleCompression { base: pruned, factors });
    }

    let (compressed, summary) = staged(obs, Stage::Package, Some(layer_idx), || {
        let down = roles.pop().unwrap();
        let up = roles.pop().unwrap();
        let packed = CompressedLayer { gate: layer.gate.clone(), top_k: layer.top_k, up, down, trimmed: Vec::new() };
        let packed = trim_deltas(&packed, &freq, config.trim).map_err(at(Stage::Package, None))?;
        packed.validate().map_err(at(Stage::Package, None))?;
        let params = ParamReport::for_layer(&packed, config.nominal_ratio(layer_idx), config.sparsity);
        let summary = LayerSummary {
            layer: layer_idx,
            params,
            factors: core::mem::take(&mut records),
            merge_fallback: fallback,
            trimmed: packed.trimmed.clone(),
            frequency: freq.clone(),
        };
        Ok((packed, summary))
    })?;
    Ok((compressed, summary))
}

fn weighted_norm(delta: &Matrix, gram: &Matrix) -> f64 {
    let dg = delta.matmul(gram).expect("gram matches delta");
    let tr: f64 = dg.as_slice().iter().zip(delta.as_slice()).map(|(a, b)| a * b).sum();
    libm::sqrt(tr.max(0.0))
}

/// A layer that is either left dense or compressed.
#[derive(Debug, Clone, PartialEq)]
pub enum RuntimeLayer {
    Dense(MoELayer),
    Compressed(CompressedLayer),
}

impl RuntimeLayer {
    pub fn d_model(&self) -> usize {
        match self {
            RuntimeLayer::Dense(l) => l.d_model(),
            RuntimeLayer::Compressed(l) => l.d_model(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeModel {
    pub layers: Vec<RuntimeLayer>,
    pub head: Matrix,
}

/// Output of a batched runtime forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub logits: Matrix,
    pub traces: Vec<RoutingTrace>,
    /// Masks of compressed layers (`None` for dense ones).
    pub masks: Vec<Option<LayerMasks>>,
}

impl RuntimeModel {
    pub fn from_dense(model: &MoEModel) -> Self {
        RuntimeModel {
            layers: model.layers.iter().cloned().map(RuntimeLayer::Dense).collect(),
            head: model.head.clone(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].d_model()
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    /// Forward of one batch; compressed layers compute one dynamic mask for it.
    pub fn forward_batch(&self, x_batch: &Matrix) -> Result<BatchOutput> {
        if x_batch.rows() != self.d_model() {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                detail: format!("batch has {} rows, d_model is {}", x_batch.rows(), self.d_model()),
            });
        }
        let mut a = x_batch.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                RuntimeLayer::Dense(l) => {
                    let mut trace = RoutingTrace::new(l.n_experts());
                    let mut next = Matrix::zeros(l.d_model(), a.cols());
                    for j in 0..a.cols() {
                        let (y, r) = l.forward_token(&a.col(j));
                        trace.push(r);
                        next.set_col(j, &y);
                    }
                    traces.push(trace);
                    masks.push(None);
                    a = next;
                }
                RuntimeLayer::Compressed(l) => {
                    let out = compressed_forward(l, &a)?;
                    traces.push(out.trace);
                    masks.push(Some(out.masks));
                    a = out.y;
                }
            }
        }
        Ok(BatchOutput { logits: self.head.matmul(&a)?, traces, masks })
    }

    /// Logits for all tokens, processed in consecutive batches.
    pub fn logits(&self, tokens: &Matrix, batch_size: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.num_classes(), tokens.cols());
        for start in (0..tokens.cols()).step_by(batch_size.max(1)) {
            let end = (start + batch_size).min(tokens.cols());
            let batch = Matrix::from_fn(tokens.rows(), end - start, |i, j| tokens[(i, start + j)]);
            let o = self.forward_batch(&batch)?;
            for j in 0..end - start {
                out.set_col(start + j, &o.logits.col(j));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean negative log-likelihood.
    pub loss: f64,
    /// `exp(loss)`.
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean cross-entropy of `labels` under the model, in batches.
pub fn evaluate(model: &RuntimeModel, tokens: &Matrix, labels: &[usize], batch_size: usize) -> Result<EvalResult> {
    if labels.len() != tokens.cols() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            detail: format!("{} labels for {} tokens", labels.len(), tokens.cols()),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::InvalidParameter { name: "label", detail: format!("{bad} >= {}", model.num_classes()) });
    }
    let logits = model.logits(tokens, batch_size)?;
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        total -= log_softmax_at(&logits.col(j), y);
    }
    let loss = total / labels.len() as f64;
    Ok(EvalResult { loss, perplexity: libm::exp(loss), tokens: labels.len() })
}

/// Compressed model plus per-layer summaries (dense layers have none).
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionOutcome {
    pub model: RuntimeModel,
    pub summaries: Vec<LayerSummary>,
}

/// Compresses the layers for which `select` is true; others stay dense.
pub fn compress_selected(
    model: &MoEModel,
    ctx: &CalibrationContext,
    config: &CompressionConfig,
    select: impl Fn(usize) -> bool,
    obs: &mut dyn StageObserver,
) -> Result<CompressionOutcome> {
    config.validate_for(model)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut summaries = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        if select(l) {
            let (c, s) = compress_layer(l, layer, &ctx.layers[l], ctx.fisher.as_ref(), config, obs)?;
            layers.push(RuntimeLayer::Compressed(c));
            summaries.push(s);
        } else {
            layers.push(RuntimeLayer::Dense(layer.clone()));
        }
    }
    Ok(CompressionOutcome { model: RuntimeModel { layers, head: model.head.clone() }, summaries })
}

/// Full pipeline over every layer, sequentially.
pub fn compress(
    config: &CompressionConfig,
    model: &MoEModel,
    calib: &Matrix,
    labels: Option<&[usize]>,
) -> Result<CompressionOutcome> {
    config.validate_for(model)?;
    let ctx = CalibrationContext::prepare(model, calib, labels, config, &mut NoObserver)?;
    compress_selected(model, &ctx, config, |_| true, &mut NoObserver)
}

/// Baseline that prunes each expert matrix's columns directly (no merge,
/// no factors), sized to store at most `budget` entries per layer.
///
/// Per role, expert `i` keeps the columns with the largest
/// `‖W_i[:,j]‖·‖X_i[j,:]‖`, where `X_i` are the tokens routed to it. The
/// kept-column counts `(up, down)` are the pair with the largest storage not
/// exceeding the budget, ties resolved toward equal kept fractions.
pub fn prune_only_layer(layer: &MoELayer, calib: &LayerCalibration, budget: usize) -> Result<(MoELayer, usize)> {
    let (n, d, h) = (layer.n_experts(), layer.d_model(), layer.hidden());
    let mut best: Option<(usize, usize, usize)> = None;
    for ku in 1..=d {
        for kd in 1..=h {
            let stored = n * (h * ku + d * kd);
            if stored > budget {
                continue;
            }
            let better = match best {
                None => true,
                Some((bu, bd, bs)) => {
                    let imbalance = |u: usize, dd: usize| (u as f64 / d as f64 - dd as f64 / h as f64).abs();
                    stored > bs || (stored == bs && imbalance(ku, kd) < imbalance(bu, bd))
                }
            };
            if better {
                best = Some((ku, kd, stored));
            }
        }
    }
    let (ku, kd, stored) = best.ok_or(Error::InvalidParameter {
        name: "budget",
        detail: format!("{budget} entries cannot hold one column per expert matrix"),
    })?;
    let mut experts = Vec::with_capacity(n);
    for (i, e) in layer.experts.iter().enumerate() {
        let g = &calib.grams[i];
        let keep = |w: &Matrix, gram: &Matrix, count: usize| -> Matrix {
            let norms = crate::linalg::col_l2_norms(w);
            let score: Vec<f64> = (0..w.cols()).map(|j| norms[j] * libm::sqrt(gram[(j, j)].max(0.0))).collect();
            let mut order: Vec<usize> = (0..w.cols()).collect();
            order.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
            let mut out = Matrix::zeros(w.rows(), w.cols());
            for &j in &order[..count] {
                for r in 0..w.rows() {
                    out[(r, j)] = w[(r, j)];
                }
            }
            out
        };
        experts.push(Expert { up: keep(&e.up, &g.up, ku), down: keep(&e.down, &g.down, kd) });
    }
    Ok((MoELayer::new(layer.gate.clone(), experts, layer.top_k)?, stored))
}

/// Applies [`prune_only_layer`] to every layer with the given per-layer budgets.
pub fn prune_only_model(model: &MoEModel, ctx: &CalibrationContext, budgets: &[usize]) -> Result<(RuntimeModel, Vec<usize>)> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut stored = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let (pl, s) = prune_only_layer(layer, &ctx.layers[l], budgets[l])?;
        layers.push(RuntimeLayer::Dense(pl));
        stored.push(s);
    }
    Ok((RuntimeModel { layers, head: model.head.clone() }, stored))
}

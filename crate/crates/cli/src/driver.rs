//! Runs the compression pipeline with per-layer parallelism, collects stage
//! timings and assembles the report.

use std::time::Instant;

use d2moe::analysis::{allocate_adaptive_ratios, cka, layer_sensitivity_scan};
use d2moe::factorize::RankPolicy;
use d2moe::pipeline::{
    compress_layer, evaluate, CalibrationContext, CompressionConfig, RuntimeLayer, RuntimeModel, StageObserver,
};
use d2moe::runtime::census_static;
use d2moe::{MoEModel, Role, Stage};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::Calibration;
use crate::report::{CompressionReport, EvalSummary, Timing};

pub const THREADS_ENV: &str = "D2MOE_THREADS";

/// Records wall-time per stage and layer.
#[derive(Default)]
pub struct TimingObserver {
    open: Vec<(Stage, Option<usize>, Instant)>,
    pub timings: Vec<Timing>,
}

impl StageObserver for TimingObserver {
    fn begin(&mut self, stage: Stage, layer: Option<usize>) {
        self.open.push((stage, layer, Instant::now()));
    }

    fn end(&mut self, stage: Stage, layer: Option<usize>) {
        if let Some(pos) = self.open.iter().rposition(|(s, l, _)| *s == stage && *l == layer) {
            let (_, _, start) = self.open.remove(pos);
            self.timings.push(Timing { stage: stage.name().to_string(), layer, seconds: start.elapsed().as_secs_f64() });
        }
    }
}

/// Worker pool capped by `D2MOE_THREADS` when set.
pub fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer"))
        })?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Checks that loaded calibration statistics fit the model.
pub fn check_stats(model: &MoEModel, ctx: &CalibrationContext, config: &CompressionConfig) -> CliResult<()> {
    let bad = |detail: String| CliError::Config(format!("calibration stats do not match the model: {detail}"));
    if ctx.layers.len() != model.layers.len() {
        return Err(bad(format!("{} layers vs {}", ctx.layers.len(), model.layers.len())));
    }
    for (l, (lc, layer)) in ctx.layers.iter().zip(&model.layers).enumerate() {
        let (n, d, h) = (layer.n_experts(), layer.d_model(), layer.hidden());
        let ok = lc.grams.len() == n
            && lc.trace.counts.len() == n
            && lc.grams.iter().all(|g| g.up.shape() == (d, d) && g.down.shape() == (h, h))
            && lc.inputs.rows() == d
            && lc.mixed_hidden.rows() == h;
        if !ok {
            return Err(bad(format!("layer {l} shapes")));
        }
    }
    if config.needs_fisher() && ctx.fisher.is_none() {
        return Err(bad(format!("merge `{}` needs Fisher information", config.merge.name())));
    }
    Ok(())
}

pub fn prepare_context(model: &MoEModel, calib: &Calibration, rc: &RunConfig, obs: &mut TimingObserver) -> CliResult<CalibrationContext> {
    rc.compression.validate_for(model)?;
    Ok(CalibrationContext::prepare(model, &calib.tokens, Some(&calib.labels), &rc.compression, obs)?)
}

/// Compresses every layer, in parallel, and evaluates before and after on
/// the calibration tokens.
pub fn run_compression(
    model: &MoEModel,
    calib: &Calibration,
    stats: Option<CalibrationContext>,
    rc: &RunConfig,
) -> CliResult<(RuntimeModel, CompressionReport)> {
    let config = &rc.compression;
    config.validate_for(model)?;
    let mut obs = TimingObserver::default();
    let ctx = match stats {
        Some(ctx) => {
            check_stats(model, &ctx, config)?;
            ctx
        }
        None => prepare_context(model, calib, rc, &mut obs)?,
    };

    let pool = thread_pool()?;
    let results: Vec<_> = pool.install(|| {
        model
            .layers
            .par_iter()
            .enumerate()
            .map(|(l, layer)| {
                let mut o = TimingObserver::default();
                let r = compress_layer(l, layer, &ctx.layers[l], ctx.fisher.as_ref(), config, &mut o);
                r.map(|(c, s)| (c, s, o.timings))
            })
            .collect()
    });
    let mut layers = Vec::with_capacity(results.len());
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        let (c, s, t) = r?;
        layers.push(RuntimeLayer::Compressed(c));
        summaries.push(s);
        obs.timings.extend(t);
    }
    let compressed = RuntimeModel { layers, head: model.head.clone() };

    let start = Instant::now();
    let before = evaluate(&RuntimeModel::from_dense(model), &calib.tokens, &calib.labels, config.batch_size)?;
    let after = evaluate(&compressed, &calib.tokens, &calib.labels, config.batch_size)
        .map_err(|e| e.at(Stage::Evaluate, None, None))?;
    obs.timings.push(Timing { stage: Stage::Evaluate.name().into(), layer: None, seconds: start.elapsed().as_secs_f64() });

    for t in &obs.timings {
        let layer = t.layer.map_or("-".to_string(), |l| l.to_string());
        eprintln!("stage={} layer={layer} seconds={:.6}", t.stage, t.seconds);
    }

    let report = CompressionReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: rc.to_pairs(),
        seeds: vec![("fisher".to_string(), config.fisher_seed)],
        eval: Some(EvalSummary {
            loss_before: before.loss,
            loss_after: after.loss,
            perplexity_before: before.perplexity,
            perplexity_after: after.perplexity,
            tokens: after.tokens,
        }),
        layers: summaries,
        timings: if rc.timings { obs.timings } else { Vec::new() },
    };
    Ok((compressed, report))
}

/// Stored parameters of every compressed layer plus dense expert parameters of the rest.
pub fn stored_expert_params(model: &RuntimeModel) -> usize {
    model
        .layers
        .iter()
        .map(|l| match l {
            RuntimeLayer::Dense(d) => d.experts.iter().map(|e| e.param_count()).sum(),
            RuntimeLayer::Compressed(c) => census_static(c),
        })
        .sum()
}

/// Expert-pair CKA for one layer and role, row-major over `(i, j)`.
pub fn cka_table(model: &MoEModel, layer: usize, role: Role) -> CliResult<Vec<(usize, usize, f64)>> {
    let l = model
        .layers
        .get(layer)
        .ok_or_else(|| CliError::key("layer", format!("{layer} out of range for {} layers", model.layers.len())))?;
    let n = l.n_experts();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let v = if i == j { 1.0 } else { cka(l.experts[i].weight(role), l.experts[j].weight(role))? };
            out.push((i, j, v));
        }
    }
    Ok(out)
}

pub struct SensitivityRow {
    pub layer: usize,
    pub loss_increase: f64,
    pub allocated_ratio: f64,
}

/// Per-layer sensitivity at the configured ratio and a budget-preserving
/// reallocation of delta ratios around `budget_ratio`.
pub fn sensitivity_rows(
    model: &MoEModel,
    calib: &Calibration,
    rc: &RunConfig,
    budget_ratio: f64,
    p_min: f64,
) -> CliResult<Vec<SensitivityRow>> {
    let prof = layer_sensitivity_scan(model, &calib.tokens, &calib.labels, &rc.compression)?;
    let params: Vec<usize> = model.layers.iter().map(|l| l.experts.iter().map(|e| e.param_count()).sum()).collect();
    let alloc = allocate_adaptive_ratios(&prof.loss_increase, &params, budget_ratio, p_min)?;
    Ok(prof
        .loss_increase
        .iter()
        .zip(&alloc.ratios)
        .enumerate()
        .map(|(layer, (&loss_increase, &allocated_ratio))| SensitivityRow { layer, loss_increase, allocated_ratio })
        .collect())
}

pub struct FrontierPoint {
    pub ratio: f64,
    pub loss: f64,
    pub params: usize,
}

/// Calibration loss and stored parameters across delta ratios.
pub fn frontier(model: &MoEModel, calib: &Calibration, rc: &RunConfig, ratios: &[f64]) -> CliResult<Vec<FrontierPoint>> {
    let mut obs = TimingObserver::default();
    let ctx = prepare_context(model, calib, rc, &mut obs)?;
    let mut out = Vec::with_capacity(ratios.len());
    for &p in ratios {
        let config = CompressionConfig { rank_policy: RankPolicy::Ratio(p), layer_ratios: None, ..rc.compression.clone() };
        config.validate_for(model)?;
        let res = d2moe::pipeline::compress_selected(model, &ctx, &config, |_| true, &mut obs)?;
        let loss = evaluate(&res.model, &calib.tokens, &calib.labels, config.batch_size)?.loss;
        out.push(FrontierPoint { ratio: p, loss, params: stored_expert_params(&res.model) });
    }
    Ok(out)
}

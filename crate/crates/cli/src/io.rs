//! Mapping between in-memory models and containers.
//!
//! Tensor names: `layer.<l>.gate`, `layer.<l>.expert.<i>.{up,down}` and
//! `head` for dense layers; compressed layers store
//! `layer.<l>.<role>.base` (kept columns only) and
//! `layer.<l>.<role>.expert.<i>.{u,v}` factors, with the kept column ids,
//! sparsity and trimmed experts in metadata.

use std::path::Path;

use d2moe::linalg::col_l2_norms;
use d2moe::moe::{GramStats, LayerCalibration, RoutingTrace};
use d2moe::pipeline::{RuntimeLayer, RuntimeModel};
use d2moe::prune::{prune_counts, PruneMask, PrunedBase};
use d2moe::runtime::{CompressedLayer, RoleCompression};
use d2moe::factorize::DeltaFactor;
use d2moe::{Expert, Matrix, MoELayer, MoEModel, Role};

use crate::container::{Container, ContainerError};
use crate::error::{CliError, CliResult};

pub const KIND_DENSE: &str = "dense-model";
pub const KIND_RUNTIME: &str = "runtime-model";
pub const KIND_CALIB: &str = "calibration";
pub const KIND_STATS: &str = "calibration-stats";

fn meta_err(key: &str, detail: impl Into<String>) -> ContainerError {
    ContainerError::Meta { key: key.to_string(), detail: detail.into() }
}

pub fn join_usize(v: &[usize]) -> String {
    if v.is_empty() {
        "-".to_string()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

pub fn split_usize(key: &str, s: &str) -> Result<Vec<usize>, ContainerError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| t.parse().map_err(|_| meta_err(key, format!("bad index `{t}`")))).collect()
}

fn write_dense_layer(c: &mut Container, l: usize, layer: &MoELayer) -> Result<(), ContainerError> {
    c.set_meta(format!("layer.{l}.top_k"), layer.top_k.to_string())?;
    c.push(format!("layer.{l}.gate"), layer.gate.clone())?;
    for (i, e) in layer.experts.iter().enumerate() {
        c.push(format!("layer.{l}.expert.{i}.up"), e.up.clone())?;
        c.push(format!("layer.{l}.expert.{i}.down"), e.down.clone())?;
    }
    Ok(())
}

fn read_dense_layer(c: &Container, l: usize) -> Result<MoELayer, CliError> {
    let top_k: usize = c.meta_parse(&format!("layer.{l}.top_k"))?;
    let gate = c.tensor(&format!("layer.{l}.gate"))?.clone();
    let experts = (0..gate.rows())
        .map(|i| {
            Ok(Expert {
                up: c.tensor(&format!("layer.{l}.expert.{i}.up"))?.clone(),
                down: c.tensor(&format!("layer.{l}.expert.{i}.down"))?.clone(),
            })
        })
        .collect::<Result<Vec<_>, ContainerError>>()?;
    Ok(MoELayer::new(gate, experts, top_k)?)
}

pub fn dense_to_container(model: &MoEModel) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    c.set_meta("kind", KIND_DENSE)?;
    c.set_meta("layers", model.layers.len().to_string())?;
    for (l, layer) in model.layers.iter().enumerate() {
        write_dense_layer(&mut c, l, layer)?;
    }
    c.push("head", model.head.clone())?;
    Ok(c)
}

fn write_compressed_layer(c: &mut Container, l: usize, layer: &CompressedLayer) -> Result<(), ContainerError> {
    c.set_meta(format!("layer.{l}.top_k"), layer.top_k.to_string())?;
    c.set_meta(format!("layer.{l}.trimmed"), join_usize(&layer.trimmed))?;
    c.push(format!("layer.{l}.gate"), layer.gate.clone())?;
    for role in Role::ALL {
        let rc = layer.role(role);
        let r = role.name();
        c.set_meta(format!("layer.{l}.{r}.total_cols"), rc.base.mask.total_cols.to_string())?;
        c.set_meta(format!("layer.{l}.{r}.kept_cols"), join_usize(&rc.base.kept_col_ids))?;
        c.set_meta(format!("layer.{l}.{r}.sparsity"), format!("{:?}", rc.base.mask.sparsity))?;
        c.push(format!("layer.{l}.{r}.base"), rc.base.kept.clone())?;
        for (i, f) in rc.factors.iter().enumerate() {
            if let Some(f) = f {
                c.push(format!("layer.{l}.{r}.expert.{i}.u"), f.u.clone())?;
                c.push(format!("layer.{l}.{r}.expert.{i}.v"), f.v.clone())?;
            }
        }
    }
    Ok(())
}

fn read_compressed_layer(c: &Container, l: usize) -> Result<CompressedLayer, CliError> {
    let top_k: usize = c.meta_parse(&format!("layer.{l}.top_k"))?;
    let tkey = format!("layer.{l}.trimmed");
    let trimmed = split_usize(&tkey, c.meta_required(&tkey)?)?;
    let gate = c.tensor(&format!("layer.{l}.gate"))?.clone();
    let n = gate.rows();
    let mut roles = Vec::with_capacity(2);
    for role in Role::ALL {
        let r = role.name();
        let total_cols: usize = c.meta_parse(&format!("layer.{l}.{r}.total_cols"))?;
        let sparsity: f64 = c.meta_parse(&format!("layer.{l}.{r}.sparsity"))?;
        let kkey = format!("layer.{l}.{r}.kept_cols");
        let kept_col_ids = split_usize(&kkey, c.meta_required(&kkey)?)?;
        let kept = c.tensor(&format!("layer.{l}.{r}.base"))?.clone();
        if kept.cols() != kept_col_ids.len()
            || kept_col_ids.windows(2).any(|w| w[0] >= w[1])
            || kept_col_ids.last().is_some_and(|&j| j >= total_cols)
        {
            return Err(meta_err(&kkey, "kept column ids disagree with the base tensor").into());
        }
        let mut mask = PruneMask::new(total_cols, sparsity)?;
        mask.static_removed = (0..total_cols).filter(|j| kept_col_ids.binary_search(j).is_err()).collect();
        let (stat, _) = prune_counts(total_cols, sparsity);
        if mask.static_removed.len() != stat {
            return Err(meta_err(&kkey, format!("{} removed columns, sparsity implies {stat}", mask.static_removed.len())).into());
        }
        let kept_col_norms = col_l2_norms(&kept);
        let base = PrunedBase { kept, kept_col_ids, kept_col_norms, mask };
        let mut factors = Vec::with_capacity(n);
        for i in 0..n {
            let uname = format!("layer.{l}.{r}.expert.{i}.u");
            match (c.get(&uname), c.get(&format!("layer.{l}.{r}.expert.{i}.v"))) {
                (Some(u), Some(v)) => {
                    factors.push(Some(DeltaFactor { u: u.clone(), v: v.clone(), rank: u.cols(), expert: i, role }))
                }
                (None, None) if trimmed.contains(&i) => factors.push(None),
                _ => return Err(ContainerError::MissingTensor(uname).into()),
            }
        }
        roles.push(RoleCompression { base, factors });
    }
    let down = roles.pop().unwrap();
    let up = roles.pop().unwrap();
    let layer = CompressedLayer { gate, top_k, up, down, trimmed };
    layer.validate()?;
    Ok(layer)
}

pub fn runtime_to_container(model: &RuntimeModel) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    c.set_meta("kind", KIND_RUNTIME)?;
    c.set_meta("layers", model.layers.len().to_string())?;
    for (l, layer) in model.layers.iter().enumerate() {
        match layer {
            RuntimeLayer::Dense(d) => {
                c.set_meta(format!("layer.{l}.kind"), "dense")?;
                write_dense_layer(&mut c, l, d)?;
            }
            RuntimeLayer::Compressed(cl) => {
                c.set_meta(format!("layer.{l}.kind"), "compressed")?;
                write_compressed_layer(&mut c, l, cl)?;
            }
        }
    }
    c.push("head", model.head.clone())?;
    Ok(c)
}

pub fn dense_from_container(c: &Container) -> CliResult<MoEModel> {
    expect_kind(c, KIND_DENSE)?;
    let layers: usize = c.meta_parse("layers")?;
    let ls = (0..layers).map(|l| read_dense_layer(c, l)).collect::<CliResult<Vec<_>>>()?;
    Ok(MoEModel::new(ls, c.tensor("head")?.clone())?)
}

/// Loads either a dense or a runtime (possibly compressed) model.
pub fn runtime_from_container(c: &Container) -> CliResult<RuntimeModel> {
    match c.meta("kind") {
        Some(KIND_DENSE) => Ok(RuntimeModel::from_dense(&dense_from_container(c)?)),
        Some(KIND_RUNTIME) => {
            let layers: usize = c.meta_parse("layers")?;
            let mut ls = Vec::with_capacity(layers);
            for l in 0..layers {
                let key = format!("layer.{l}.kind");
                ls.push(match c.meta_required(&key)? {
                    "dense" => RuntimeLayer::Dense(read_dense_layer(c, l)?),
                    "compressed" => RuntimeLayer::Compressed(read_compressed_layer(c, l)?),
                    other => return Err(meta_err(&key, format!("unknown layer kind `{other}`")).into()),
                });
            }
            let model = RuntimeModel { layers: ls, head: c.tensor("head")?.clone() };
            if model.layers.is_empty() || model.layers.iter().any(|l| l.d_model() != model.head.cols()) {
                return Err(meta_err("layers", "layer widths disagree with the head").into());
            }
            Ok(model)
        }
        other => Err(meta_err("kind", format!("expected a model container, found {other:?}")).into()),
    }
}

fn expect_kind(c: &Container, kind: &str) -> Result<(), ContainerError> {
    match c.meta("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(meta_err("kind", format!("expected `{kind}`, found {other:?}"))),
    }
}

/// Calibration tokens (`d_model × T`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub tokens: Matrix,
    pub labels: Vec<usize>,
}

pub fn calibration_to_container(cal: &Calibration) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    c.set_meta("kind", KIND_CALIB)?;
    c.push("tokens", cal.tokens.clone())?;
    let labels = Matrix::new(1, cal.labels.len(), cal.labels.iter().map(|&y| y as f64).collect())
        .map_err(|_| meta_err("labels", "empty label vector"))?;
    c.push("labels", labels)?;
    Ok(c)
}

pub fn calibration_from_container(c: &Container) -> CliResult<Calibration> {
    expect_kind(c, KIND_CALIB)?;
    let tokens = c.tensor("tokens")?.clone();
    let raw = c.tensor("labels")?;
    if raw.rows() != 1 || raw.cols() != tokens.cols() {
        return Err(meta_err("labels", format!("shape {:?} for {} tokens", raw.shape(), tokens.cols())).into());
    }
    let labels = raw
        .as_slice()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(meta_err("labels", format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Calibration { tokens, labels })
}

/// Per-layer calibration statistics (Grams, routing counts, base inputs)
/// and, when present, the Fisher blocks.
pub fn stats_to_container(
    layers: &[LayerCalibration],
    fisher: Option<&d2moe::grad::FisherInfo>,
) -> Result<Container, ContainerError> {
    let mut c = Container::new();
    c.set_meta("kind", KIND_STATS)?;
    c.set_meta("layers", layers.len().to_string())?;
    for (l, lc) in layers.iter().enumerate() {
        c.set_meta(format!("layer.{l}.counts"), join_usize(&lc.trace.counts))?;
        c.push(format!("layer.{l}.inputs"), lc.inputs.clone())?;
        c.push(format!("layer.{l}.mixed_hidden"), lc.mixed_hidden.clone())?;
        for (i, g) in lc.grams.iter().enumerate() {
            c.set_meta(format!("layer.{l}.expert.{i}.tokens"), g.tokens.to_string())?;
            c.push(format!("layer.{l}.expert.{i}.gram_up"), g.up.clone())?;
            c.push(format!("layer.{l}.expert.{i}.gram_down"), g.down.clone())?;
        }
    }
    if let Some(f) = fisher {
        c.set_meta("fisher.mode", f.mode.name())?;
        c.set_meta("fisher.samples", f.sample_count.to_string())?;
        for (l, experts) in f.layers.iter().enumerate() {
            for (i, e) in experts.iter().enumerate() {
                c.push(format!("fisher.{l}.expert.{i}.up"), e.up.clone())?;
                c.push(format!("fisher.{l}.expert.{i}.down"), e.down.clone())?;
            }
        }
    }
    Ok(c)
}

pub fn stats_from_container(c: &Container) -> CliResult<d2moe::pipeline::CalibrationContext> {
    expect_kind(c, KIND_STATS)?;
    let n_layers: usize = c.meta_parse("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let ckey = format!("layer.{l}.counts");
        let counts = split_usize(&ckey, c.meta_required(&ckey)?)?;
        let n = counts.len();
        let mut trace = RoutingTrace::new(n);
        trace.counts = counts;
        let grams = (0..n)
            .map(|i| {
                Ok(GramStats {
                    up: c.tensor(&format!("layer.{l}.expert.{i}.gram_up"))?.clone(),
                    down: c.tensor(&format!("layer.{l}.expert.{i}.gram_down"))?.clone(),
                    tokens: c.meta_parse(&format!("layer.{l}.expert.{i}.tokens"))?,
                })
            })
            .collect::<Result<Vec<_>, ContainerError>>()?;
        layers.push(LayerCalibration {
            grams,
            trace,
            inputs: c.tensor(&format!("layer.{l}.inputs"))?.clone(),
            mixed_hidden: c.tensor(&format!("layer.{l}.mixed_hidden"))?.clone(),
        });
    }
    let fisher = match c.meta("fisher.mode") {
        None => None,
        Some(mode) => {
            let mode = d2moe::grad::FisherMode::parse(mode).ok_or_else(|| meta_err("fisher.mode", mode))?;
            let mut fl = Vec::with_capacity(n_layers);
            for (l, lc) in layers.iter().enumerate() {
                let experts = (0..lc.grams.len())
                    .map(|i| {
                        Ok(Expert {
                            up: c.tensor(&format!("fisher.{l}.expert.{i}.up"))?.clone(),
                            down: c.tensor(&format!("fisher.{l}.expert.{i}.down"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>, ContainerError>>()?;
                fl.push(experts);
            }
            Some(d2moe::grad::FisherInfo { layers: fl, sample_count: c.meta_parse("fisher.samples")?, mode })
        }
    };
    Ok(d2moe::pipeline::CalibrationContext { layers, fisher })
}

pub fn save(c: &Container, path: &Path) -> CliResult<()> {
    c.save(path).map_err(|e| CliError::io(path, e))
}

impl From<ContainerError> for CliError {
    fn from(source: ContainerError) -> Self {
        CliError::Container { path: std::path::PathBuf::from("<memory>"), source }
    }
}

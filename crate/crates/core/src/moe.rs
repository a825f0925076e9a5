//! Toy mixture-of-experts network: top-k routing, dense forward pass and
//! calibration capture.
//!
//! Tokens are columns of a `d_model × T` matrix. Each expert is a two-layer
//! FFN `E(x) = W_down · SiLU(W_up · x)`; a layer mixes the `top_k` selected
//! experts with softmax weights over the surviving router logits. Layers are
//! chained without residuals and a linear head produces class logits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Weight slot of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// `hidden × d_model`, applied first and followed by SiLU.
    Up,
    /// `d_model × hidden`.
    Down,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Up, Role::Down];

    pub fn name(self) -> &'static str {
        match self {
            Role::Up => "up",
            Role::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "up" => Some(Role::Up),
            "down" => Some(Role::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub up: Matrix,
    pub down: Matrix,
}

impl Expert {
    pub fn weight(&self, role: Role) -> &Matrix {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }

    pub fn weight_mut(&mut self, role: Role) -> &mut Matrix {
        match role {
            Role::Up => &mut self.up,
            Role::Down => &mut self.down,
        }
    }

    pub fn hidden(&self) -> usize {
        self.up.rows()
    }

    pub fn param_count(&self) -> usize {
        self.up.len() + self.down.len()
    }

    /// `(u, h, e)`: pre-activation, post-activation and expert output.
    pub(crate) fn forward_parts(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let u = self.up.matvec(x);
        let h: Vec<f64> = u.iter().map(|&v| silu(v)).collect();
        let e = self.down.matvec(&h);
        (u, h, e)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_parts(x).2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    /// `N × d_model` router weights.
    pub gate: Matrix,
    pub experts: Vec<Expert>,
    pub top_k: usize,
}

impl MoELayer {
    pub fn new(gate: Matrix, experts: Vec<Expert>, top_k: usize) -> Result<Self> {
        let layer = MoELayer { gate, experts, top_k };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.experts.len();
        let d = self.gate.cols();
        if n == 0 || self.gate.rows() != n {
            return Err(Error::ShapeMismatch {
                op: "moe_layer",
                detail: format!("gate has {} rows for {n} experts", self.gate.rows()),
            });
        }
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::InvalidParameter {
                name: "top_k",
                detail: format!("{} not in 1..={n}", self.top_k),
            });
        }
        let h = self.experts[0].hidden();
        for (i, e) in self.experts.iter().enumerate() {
            if e.up.shape() != (h, d) || e.down.shape() != (d, h) {
                return Err(Error::ShapeMismatch {
                    op: "moe_layer",
                    detail: format!(
                        "expert {i} up {:?} down {:?}, expected ({h}, {d}) and ({d}, {h})",
                        e.up.shape(),
                        e.down.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.gate.cols()
    }

    pub fn hidden(&self) -> usize {
        self.experts[0].hidden()
    }

    pub fn route(&self, x: &[f64]) -> Routing {
        route(&self.gate, self.top_k, x)
    }

    /// Sparse gating weights `G(x)`, length N.
    pub fn gate_weights(&self, x: &[f64]) -> Vec<f64> {
        self.route(x).dense(self.n_experts())
    }

    pub fn forward_token(&self, x: &[f64]) -> (Vec<f64>, Routing) {
        let routing = self.route(x);
        let mut y = vec![0.0; self.d_model()];
        for (&i, &w) in routing.experts.iter().zip(&routing.weights) {
            let e = self.experts[i].forward(x);
            for (a, b) in y.iter_mut().zip(&e) {
                *a += w * b;
            }
        }
        (y, routing)
    }
}

/// Gating weights `G(x)` for one layer, free function form.
pub fn gate(x: &[f64], layer: &MoELayer) -> Vec<f64> {
    layer.gate_weights(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub layers: Vec<MoELayer>,
    /// `num_classes × d_model`.
    pub head: Matrix,
}

impl MoEModel {
    pub fn new(layers: Vec<MoELayer>, head: Matrix) -> Result<Self> {
        let model = MoEModel { layers, head };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter { name: "layers", detail: "model has no layers".into() });
        }
        let d = self.layers[0].d_model();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.d_model() != d {
                return Err(Error::ShapeMismatch {
                    op: "moe_model",
                    detail: format!("layer {l} has d_model {} but layer 0 has {d}", layer.d_model()),
                });
            }
        }
        if self.head.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "moe_model",
                detail: format!("head has {} columns, d_model is {d}", self.head.cols()),
            });
        }
        if self.head.rows() < 2 {
            return Err(Error::InvalidParameter { name: "num_classes", detail: "need at least 2".into() });
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.layers[0].d_model()
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    /// Per-token forward: class logits plus the routing of every layer.
    pub fn forward_token(&self, x: &[f64]) -> (Vec<f64>, Vec<Routing>) {
        let mut a = x.to_vec();
        let mut routes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, r) = layer.forward_token(&a);
            routes.push(r);
            a = y;
        }
        (self.head.matvec(&a), routes)
    }
}

/// Selected experts for one token, in selection order, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Routing {
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut g = vec![0.0; n];
        for (&i, &w) in self.experts.iter().zip(&self.weights) {
            g[i] = w;
        }
        g
    }
}

/// Top-k over router logits `W_g·x` (ties favour the lower index), then a
/// softmax over the survivors only.
pub fn route(gate: &Matrix, top_k: usize, x: &[f64]) -> Routing {
    let logits = gate.matvec(x);
    route_logits(&logits, top_k)
}

pub fn route_logits(logits: &[f64], top_k: usize) -> Routing {
    let experts = top_k_indices(logits, top_k);
    let max = logits[experts[0]];
    let exps: Vec<f64> = experts.iter().map(|&i| libm::exp(logits[i] - max)).collect();
    let total: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / total).collect();
    Routing { experts, weights }
}

fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b].partial_cmp(&logits[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Per-layer record of routing decisions over a token batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub n_experts: usize,
    pub tokens: Vec<Routing>,
    /// Selection count per expert.
    pub counts: Vec<usize>,
}

impl RoutingTrace {
    pub fn new(n_experts: usize) -> Self {
        RoutingTrace { n_experts, tokens: Vec::new(), counts: vec![0; n_experts] }
    }

    pub fn push(&mut self, r: Routing) {
        for &i in &r.experts {
            self.counts[i] += 1;
        }
        self.tokens.push(r);
    }

    pub fn total_selections(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Selection frequency of each expert; sums to one.
pub fn expert_frequency(trace: &RoutingTrace) -> Vec<f64> {
    let total = trace.total_selections();
    if total == 0 {
        return vec![0.0; trace.n_experts];
    }
    trace.counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Dense forward over a `d_model × T` batch. Returns `num_classes × T`
/// logits and one routing trace per layer.
pub fn moe_forward_dense(model: &MoEModel, x_batch: &Matrix) -> Result<(Matrix, Vec<RoutingTrace>)> {
    if x_batch.rows() != model.d_model() {
        return Err(Error::ShapeMismatch {
            op: "moe_forward_dense",
            detail: format!("batch has {} rows, d_model is {}", x_batch.rows(), model.d_model()),
        });
    }
    let t = x_batch.cols();
    let mut traces: Vec<RoutingTrace> =
        model.layers.iter().map(|l| RoutingTrace::new(l.n_experts())).collect();
    let mut logits = Matrix::zeros(model.num_classes(), t);
    for j in 0..t {
        let (out, routes) = model.forward_token(&x_batch.col(j));
        for (trace, r) in traces.iter_mut().zip(routes) {
            trace.push(r);
        }
        logits.set_col(j, &out);
    }
    Ok((logits, traces))
}

/// Activation Gram matrices of one expert over the tokens routed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    /// `Σ x·xᵀ` over layer inputs, `d_model × d_model`.
    pub up: Matrix,
    /// `Σ h·hᵀ` over post-SiLU hidden vectors, `hidden × hidden`.
    pub down: Matrix,
    pub tokens: usize,
}

impl GramStats {
    pub fn gram(&self, role: Role) -> &Matrix {
        match role {
            Role::Up => &self.up,
            Role::Down => &self.down,
        }
    }
}

/// Everything calibration records for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub grams: Vec<GramStats>,
    pub trace: RoutingTrace,
    /// Layer inputs, `d_model × T`.
    pub inputs: Matrix,
    /// Gate-weighted hidden mixture `Σ_i G_i·h_i`, `hidden × T`: the input
    /// the shared Down base sees.
    pub mixed_hidden: Matrix,
}

impl LayerCalibration {
    /// Tokens that feed the shared base of `role`.
    pub fn base_inputs(&self, role: Role) -> &Matrix {
        match role {
            Role::Up => &self.inputs,
            Role::Down => &self.mixed_hidden,
        }
    }
}

/// Runs the dense model over calibration tokens and accumulates per-expert
/// Gram matrices, routing traces and the base-input matrices.
pub fn capture_calibration(model: &MoEModel, calib: &Matrix) -> Result<Vec<LayerCalibration>> {
    if calib.rows() != model.d_model() {
        return Err(Error::ShapeMismatch {
            op: "capture_calibration",
            detail: format!("calibration has {} rows, d_model is {}", calib.rows(), model.d_model()),
        });
    }
    let t = calib.cols();
    if t == 0 {
        return Err(Error::EmptyCalibration);
    }
    let mut out = Vec::with_capacity(model.layers.len());
    let mut current = calib.clone();
    for layer in &model.layers {
        let (n, d, h) = (layer.n_experts(), layer.d_model(), layer.hidden());
        let mut grams: Vec<GramStats> = (0..n)
            .map(|_| GramStats { up: Matrix::zeros(d, d), down: Matrix::zeros(h, h), tokens: 0 })
            .collect();
        let mut trace = RoutingTrace::new(n);
        let mut mixed = Matrix::zeros(h, t);
        let mut next = Matrix::zeros(d, t);
        for j in 0..t {
            let x = current.col(j);
            let routing = layer.route(&x);
            let mut y = vec![0.0; d];
            let mut z = vec![0.0; h];
            for (&i, &w) in routing.experts.iter().zip(&routing.weights) {
                let (_, hid, e) = layer.experts[i].forward_parts(&x);
                let g = &mut grams[i];
                g.up.add_outer(1.0, &x, &x);
                g.down.add_outer(1.0, &hid, &hid);
                g.tokens += 1;
                for (a, b) in y.iter_mut().zip(&e) {
                    *a += w * b;
                }
                for (a, b) in z.iter_mut().zip(&hid) {
                    *a += w * b;
                }
            }
            trace.push(routing);
            mixed.set_col(j, &z);
            next.set_col(j, &y);
        }
        out.push(LayerCalibration { grams, trace, inputs: current, mixed_hidden: mixed });
        current = next;
    }
    Ok(out)
}

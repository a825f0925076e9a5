//! Exact reverse-mode gradients of `log p(y|x)` through the toy MoE and
//! Fisher information accumulation.
//!
//! Top-k selection is piecewise constant in the router logits, so it is
//! held fixed during differentiation; the softmax over the selected experts
//! is differentiated exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::moe::{silu_grad, Expert, MoEModel, Role, Routing};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub gate: Matrix,
    /// Expert-shaped gradient blocks.
    pub experts: Vec<Expert>,
}

/// Gradient of every model parameter, mirroring [`MoEModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
    pub head: Matrix,
}

impl GradientSet {
    pub fn zeros_like(model: &MoEModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerGradient {
                gate: Matrix::zeros(l.gate.rows(), l.gate.cols()),
                experts: l
                    .experts
                    .iter()
                    .map(|e| Expert {
                        up: Matrix::zeros(e.up.rows(), e.up.cols()),
                        down: Matrix::zeros(e.down.rows(), e.down.cols()),
                    })
                    .collect(),
            })
            .collect();
        GradientSet { layers, head: Matrix::zeros(model.head.rows(), model.head.cols()) }
    }
}

/// `log softmax(logits)[y]`, computed stably.
pub fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(logits.iter().map(|&l| libm::exp(l - max)).sum::<f64>());
    logits[y] - lse
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log p(y|x)` under the dense model.
pub fn log_likelihood(model: &MoEModel, x: &[f64], y: usize) -> f64 {
    log_softmax_at(&model.forward_token(x).0, y)
}

struct ExpertTape {
    expert: usize,
    weight: f64,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

struct LayerTape {
    input: Vec<f64>,
    routing: Routing,
    experts: Vec<ExpertTape>,
}

/// Gradient of `log p(y|x)` with respect to every gate, expert and head entry.
pub fn backward_logloss(model: &MoEModel, x: &[f64], y: usize) -> Result<GradientSet> {
    if y >= model.num_classes() {
        return Err(Error::InvalidParameter {
            name: "label",
            detail: format!("{y} >= num_classes {}", model.num_classes()),
        });
    }
    if x.len() != model.d_model() {
        return Err(Error::ShapeMismatch {
            op: "backward_logloss",
            detail: format!("input length {} vs d_model {}", x.len(), model.d_model()),
        });
    }

    let mut tapes = Vec::with_capacity(model.layers.len());
    let mut a = x.to_vec();
    for layer in &model.layers {
        let routing = layer.route(&a);
        let mut y_out = vec![0.0; layer.d_model()];
        let mut experts = Vec::with_capacity(routing.experts.len());
        for (&i, &w) in routing.experts.iter().zip(&routing.weights) {
            let (pre, hidden, out) = layer.experts[i].forward_parts(&a);
            for (acc, v) in y_out.iter_mut().zip(&out) {
                *acc += w * v;
            }
            experts.push(ExpertTape { expert: i, weight: w, pre, hidden, out });
        }
        tapes.push(LayerTape { input: a, routing, experts });
        a = y_out;
    }
    let logits = model.head.matvec(&a);

    let mut grads = GradientSet::zeros_like(model);
    // d log p(y) / d logits = onehot(y) - softmax(logits)
    let mut d_logits = softmax(&logits);
    d_logits.iter_mut().for_each(|v| *v = -*v);
    d_logits[y] += 1.0;
    grads.head.add_outer(1.0, &d_logits, &a);
    let mut d_a = model.head.matvec_t(&d_logits);

    for (l, tape) in tapes.iter().enumerate().rev() {
        let layer = &model.layers[l];
        let lg = &mut grads.layers[l];
        let mut d_in = vec![0.0; layer.d_model()];
        let mut d_weight = Vec::with_capacity(tape.experts.len());
        for et in &tape.experts {
            let expert = &layer.experts[et.expert];
            d_weight.push(crate::matrix::dot(&d_a, &et.out));
            lg.experts[et.expert].down.add_outer(et.weight, &d_a, &et.hidden);
            let d_hidden = expert.down.matvec_t(&d_a);
            let d_pre: Vec<f64> = d_hidden
                .iter()
                .zip(&et.pre)
                .map(|(&dh, &u)| et.weight * dh * silu_grad(u))
                .collect();
            lg.experts[et.expert].up.add_outer(1.0, &d_pre, &tape.input);
            for (acc, v) in d_in.iter_mut().zip(expert.up.matvec_t(&d_pre)) {
                *acc += v;
            }
        }
        // Softmax over the surviving logits.
        let mean: f64 = tape.routing.weights.iter().zip(&d_weight).map(|(w, d)| w * d).sum();
        for (k, &i) in tape.routing.experts.iter().enumerate() {
            let d_logit = tape.routing.weights[k] * (d_weight[k] - mean);
            lg.gate.add_outer(1.0, &one_hot_row(i, layer.n_experts(), d_logit), &tape.input);
            for (acc, &g) in d_in.iter_mut().zip(layer.gate.row(i)) {
                *acc += d_logit * g;
            }
        }
        d_a = d_in;
    }
    Ok(grads)
}

fn one_hot_row(i: usize, n: usize, v: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = v;
    e
}

/// How the label `y` in `E_y[∇ log p(y|x)²]` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// One draw `y ~ p_θ(y|x)` per input from a seeded generator.
    SampledLabel,
    /// Use the supplied label (empirical Fisher).
    DataLabel,
}

impl FisherMode {
    pub fn name(self) -> &'static str {
        match self {
            FisherMode::SampledLabel => "sampled-label",
            FisherMode::DataLabel => "data-label",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sampled-label" | "sampled" => Some(FisherMode::SampledLabel),
            "data-label" | "data" => Some(FisherMode::DataLabel),
            _ => None,
        }
    }
}

/// Elementwise Fisher information per layer, expert and role.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    /// `layers[l][i]` holds expert `i`'s Up/Down Fisher matrices.
    pub layers: Vec<Vec<Expert>>,
    pub sample_count: usize,
    pub mode: FisherMode,
}

impl FisherInfo {
    pub fn get(&self, layer: usize, expert: usize, role: Role) -> &Matrix {
        self.layers[layer][expert].weight(role)
    }

    /// Mean of the entries, the scalar-per-expert reduction.
    pub fn scalar(&self, layer: usize, expert: usize, role: Role) -> f64 {
        let m = self.get(layer, expert, role);
        m.as_slice().iter().sum::<f64>() / m.len() as f64
    }
}

/// Averages squared gradients of `log p(y|x)` over the calibration tokens.
///
/// The average is taken over all calibration inputs; an expert that a token
/// did not route to receives an exact zero contribution from it.
pub fn fisher_accumulate(
    model: &MoEModel,
    calib: &Matrix,
    labels: Option<&[usize]>,
    mode: FisherMode,
    seed: u64,
) -> Result<FisherInfo> {
    let t = calib.cols();
    if t == 0 {
        return Err(Error::EmptyCalibration);
    }
    if calib.rows() != model.d_model() {
        return Err(Error::ShapeMismatch {
            op: "fisher_accumulate",
            detail: format!("calibration has {} rows, d_model is {}", calib.rows(), model.d_model()),
        });
    }
    if mode == FisherMode::DataLabel {
        match labels {
            Some(l) if l.len() == t => {}
            Some(l) => {
                return Err(Error::ShapeMismatch {
                    op: "fisher_accumulate",
                    detail: format!("{} labels for {t} tokens", l.len()),
                })
            }
            None => {
                return Err(Error::InvalidParameter {
                    name: "labels",
                    detail: "data-label mode needs labels".into(),
                })
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = GradientSet::zeros_like(model);
    for j in 0..t {
        let x = calib.col(j);
        let y = match mode {
            FisherMode::DataLabel => labels.unwrap()[j],
            FisherMode::SampledLabel => {
                let probs = softmax(&model.forward_token(&x).0);
                sample_index(&probs, rng.random::<f64>())
            }
        };
        let g = backward_logloss(model, &x, y)?;
        for (al, gl) in acc.layers.iter_mut().zip(&g.layers) {
            for (ae, ge) in al.experts.iter_mut().zip(&gl.experts) {
                for role in Role::ALL {
                    let dst = ae.weight_mut(role).as_mut_slice();
                    for (d, s) in dst.iter_mut().zip(ge.weight(role).as_slice()) {
                        *d += s * s;
                    }
                }
            }
        }
    }
    let inv = 1.0 / t as f64;
    let layers = acc
        .layers
        .into_iter()
        .map(|l| {
            l.experts
                .into_iter()
                .map(|e| Expert { up: e.up.scale(inv), down: e.down.scale(inv) })
                .collect()
        })
        .collect();
    Ok(FisherInfo { layers, sample_count: t, mode })
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut c = 0.0;
    for (i, p) in probs.iter().enumerate() {
        c += p;
        if u < c {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_is_stable() {
        let v = log_softmax_at(&[1000.0, 0.0], 0);
        assert!(v.abs() < 1e-12);
        assert!((log_softmax_at(&[0.0, 0.0, 0.0], 2) + libm::log(3.0)).abs() < 1e-15);
    }

    #[test]
    fn sampling_respects_cdf() {
        assert_eq!(sample_index(&[0.2, 0.5, 0.3], 0.1), 0);
        assert_eq!(sample_index(&[0.2, 0.5, 0.3], 0.6), 1);
        assert_eq!(sample_index(&[0.2, 0.5, 0.3], 0.95), 2);
    }
}

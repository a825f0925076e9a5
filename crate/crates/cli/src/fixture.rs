//! Seeded synthetic MoE model and calibration tokens.
//!
//! Per layer and role every expert is `W_i = W_common + A_i·B + E_i`: a
//! shared matrix, a rank-`r` expert-specific term whose coefficients `A_i`
//! are centered over experts (so the plain mean of the experts is
//! `W_common` and mean-merge deltas are exactly rank `r` before noise), and
//! a small full-rank perturbation `E_i`. With `r = 0` all experts are
//! identical.
//!
//! Tokens are `μ + Q·diag(σ)·z` with geometrically decaying `σ`, a random
//! rotation `Q` and a nonzero mean, so Grams are anisotropic and routing is
//! uneven. Labels are the dense model's own argmax predictions.

use d2moe::pipeline::RuntimeModel;
use d2moe::{Expert, Matrix, MoELayer, MoEModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{parse_num, KeyValues};
use crate::error::{CliError, CliResult};
use crate::io::Calibration;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_experts: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub layers: usize,
    pub top_k: usize,
    pub classes: usize,
    pub tokens: usize,
    /// Rank `r` of the expert-specific term.
    pub rank_noise: usize,
    /// Size of `A_i·B` relative to `W_common` (Frobenius).
    pub spread: f64,
    /// Size of `E_i` relative to `W_common` (Frobenius).
    pub noise: f64,
    /// Ratio between consecutive token standard deviations.
    pub decay: f64,
    /// Norm of the token mean.
    pub mean_norm: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 0,
            n_experts: 8,
            d_model: 32,
            hidden: 64,
            layers: 2,
            top_k: 2,
            classes: 8,
            tokens: 512,
            rank_noise: 4,
            spread: 1.0,
            noise: 0.05,
            decay: 0.9,
            mean_norm: 1.0,
        }
    }
}

impl FixtureSpec {
    /// Applies `key = value` settings on top of the defaults.
    pub fn from_kv(kv: &KeyValues) -> CliResult<Self> {
        let mut s = FixtureSpec::default();
        for (k, v) in &kv.0 {
            match k.as_str() {
                "seed" => s.seed = parse_num(k, v)?,
                "experts" => s.n_experts = parse_num(k, v)?,
                "d_model" => s.d_model = parse_num(k, v)?,
                "hidden" => s.hidden = parse_num(k, v)?,
                "layers" => s.layers = parse_num(k, v)?,
                "top_k" => s.top_k = parse_num(k, v)?,
                "classes" => s.classes = parse_num(k, v)?,
                "tokens" => s.tokens = parse_num(k, v)?,
                "rank_noise" => s.rank_noise = parse_num(k, v)?,
                "spread" => s.spread = parse_num(k, v)?,
                "noise" => s.noise = parse_num(k, v)?,
                "decay" => s.decay = parse_num(k, v)?,
                "mean_norm" => s.mean_norm = parse_num(k, v)?,
                other => return Err(CliError::key(other, "unknown fixture key")),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("experts", self.n_experts),
            ("d_model", self.d_model),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("top_k", self.top_k),
            ("tokens", self.tokens),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(CliError::key(k, "must be >= 1"));
            }
        }
        if self.top_k > self.n_experts {
            return Err(CliError::key("top_k", format!("{} > {} experts", self.top_k, self.n_experts)));
        }
        if self.classes < 2 {
            return Err(CliError::key("classes", "must be >= 2"));
        }
        if self.rank_noise >= self.d_model.min(self.hidden) {
            return Err(CliError::key("rank_noise", format!("must be < min(d_model, hidden) = {}", self.d_model.min(self.hidden))));
        }
        for (k, v) in [("spread", self.spread), ("noise", self.noise), ("mean_norm", self.mean_norm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CliError::key(k, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(CliError::key("decay", format!("{} not in (0, 1]", self.decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub model: MoEModel,
    pub calibration: Calibration,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Columns of a random orthogonal matrix via Gram-Schmidt.
fn rotation(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let g = normal(rng, n, n, 1.0);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = g.col(j);
        for _ in 0..2 {
            for b in &q {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(n, n, |i, j| q[j][i])
}

/// The `n` expert matrices of one role, `rows × cols`.
fn role_weights(rng: &mut ChaCha8Rng, spec: &FixtureSpec, rows: usize, cols: usize) -> Vec<Matrix> {
    let n = spec.n_experts;
    let r = spec.rank_noise;
    let scale = 1.0 / (cols as f64).sqrt();
    let common = normal(rng, rows, cols, scale);
    if r == 0 {
        return vec![common; n];
    }
    let b = normal(rng, r, cols, scale);
    let raw: Vec<Matrix> = (0..n).map(|_| normal(rng, rows, r, spec.spread / (r as f64).sqrt())).collect();
    let mut mean_a = Matrix::zeros(rows, r);
    for a in &raw {
        mean_a = mean_a.add(a).expect("same shape");
    }
    let mean_a = mean_a.scale(1.0 / n as f64);
    raw.iter()
        .map(|a| {
            let a = a.sub(&mean_a).expect("same shape");
            let specific = a.matmul(&b).expect("rank factors agree");
            let e = normal(rng, rows, cols, spec.noise * scale);
            common.add(&specific).and_then(|w| w.add(&e)).expect("same shape")
        })
        .collect()
}

pub fn gen_fixture(spec: &FixtureSpec) -> CliResult<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, h) = (spec.n_experts, spec.d_model, spec.hidden);

    let mut layers = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let gate = normal(&mut rng, n, d, 2.0 / (d as f64).sqrt());
        let ups = role_weights(&mut rng, spec, h, d);
        let downs = role_weights(&mut rng, spec, d, h);
        let experts = ups.into_iter().zip(downs).map(|(up, down)| Expert { up, down }).collect();
        layers.push(MoELayer::new(gate, experts, spec.top_k)?);
    }

    let q = rotation(&mut rng, d);
    let sigma: Vec<f64> = (0..d).map(|j| 1.5 * spec.decay.powi(j as i32)).collect();
    let mu_dir: Vec<f64> = normal(&mut rng, d, 1, 1.0).col(0);
    let mu_norm = mu_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mu: Vec<f64> = mu_dir.iter().map(|x| spec.mean_norm * x / mu_norm).collect();
    let z = normal(&mut rng, d, spec.tokens, 1.0);
    let scaled = Matrix::from_fn(d, spec.tokens, |i, j| sigma[i] * z[(i, j)]);
    let tokens = q.matmul(&scaled)?;
    let tokens = Matrix::from_fn(d, spec.tokens, |i, j| tokens[(i, j)] + mu[i]);

    // Head scaled so the dense logits have unit-order spread.
    let raw_head = normal(&mut rng, spec.classes, d, 1.0);
    let mut model = MoEModel::new(layers, raw_head)?;
    let logits = RuntimeModel::from_dense(&model).logits(&tokens, 128)?;
    let mean = logits.as_slice().iter().sum::<f64>() / logits.len() as f64;
    let var = logits.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / logits.len() as f64;
    if var > 0.0 {
        model.head = model.head.scale(2.0 / var.sqrt());
    }

    let logits = RuntimeModel::from_dense(&model).logits(&tokens, 128)?;
    let labels = (0..spec.tokens)
        .map(|j| {
            let c = logits.col(j);
            (1..c.len()).fold(0, |best, i| if c[i] > c[best] { i } else { best })
        })
        .collect();
    Ok(Fixture { model, calibration: Calibration { tokens, labels } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let spec = FixtureSpec { n_experts: 3, d_model: 6, hidden: 8, tokens: 20, rank_noise: 2, ..Default::default() };
        let a = gen_fixture(&spec).unwrap();
        let b = gen_fixture(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.calibration.tokens.shape(), (6, 20));
        assert_eq!(a.model.layers[0].experts[0].up.shape(), (8, 6));
        let c = gen_fixture(&FixtureSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rank_zero_gives_identical_experts() {
        let spec = FixtureSpec { n_experts: 4, d_model: 6, hidden: 8, tokens: 10, rank_noise: 0, ..Default::default() };
        let f = gen_fixture(&spec).unwrap();
        for layer in &f.model.layers {
            assert!(layer.experts.iter().all(|e| *e == layer.experts[0]));
        }
    }

    #[test]
    fn spec_validation() {
        let bad = [
            FixtureSpec { rank_noise: 32, ..Default::default() },
            FixtureSpec { top_k: 9, ..Default::default() },
            FixtureSpec { classes: 1, ..Default::default() },
            FixtureSpec { decay: 0.0, ..Default::default() },
            FixtureSpec { tokens: 0, ..Default::default() },
        ];
        for s in bad {
            assert!(matches!(gen_fixture(&s), Err(CliError::ConfigKey { .. })));
        }
    }
}

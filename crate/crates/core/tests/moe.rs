mod common;

use common::*;
use d2moe::moe::{capture_calibration, expert_frequency, moe_forward_dense, route_logits, silu};
use d2moe::{Expert, Matrix, MoELayer, MoEModel};
use proptest::prelude::*;

/// Scalar-loop layer forward: every product spelled out.
fn scalar_layer(layer: &MoELayer, x: &[f64]) -> Vec<f64> {
    let n = layer.n_experts();
    let (d, h) = (layer.d_model(), layer.hidden());
    let logits: Vec<f64> = (0..n).map(|i| (0..d).map(|c| layer.gate[(i, c)] * x[c]).sum()).collect();
    // Enumerate all k-subsets and keep the one with the largest logit sum,
    // ties toward the lexicographically smallest index set.
    let k = layer.top_k;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let score: f64 = set.iter().map(|&i| logits[i]).sum();
        let replace = match &best {
            None => true,
            Some((b, s)) => score > *s || (score == *s && set < *b),
        };
        if replace {
            best = Some((set, score));
        }
    }
    let set = best.unwrap().0;
    let max = set.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = set.iter().map(|&i| (logits[i] - max).exp()).sum();
    let mut y = vec![0.0; d];
    for &i in &set {
        let g = (logits[i] - max).exp() / z;
        let e = &layer.experts[i];
        let hid: Vec<f64> = (0..h).map(|r| silu((0..d).map(|c| e.up[(r, c)] * x[c]).sum())).collect();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += g * (0..h).map(|c| e.down[(r, c)] * hid[c]).sum::<f64>();
        }
    }
    y
}

#[test]
fn layer_forward_matches_scalar_oracle() {
    let model = random_model(21, 1, 5, 6, 9, 2, 3);
    let layer = &model.layers[0];
    let mut r = rng(22);
    for _ in 0..50 {
        let x = uniform(&mut r, 6, 1, 1.0).col(0);
        let (y, _) = layer.forward_token(&x);
        let o = scalar_layer(layer, &x);
        assert!(rel_diff(&y, &o) < 1e-12);
    }
}

#[test]
fn single_expert_layer_is_the_expert() {
    let model = random_model(23, 1, 1, 4, 7, 1, 2);
    let layer = &model.layers[0];
    let x = [0.3, -0.2, 0.9, 0.1];
    let (y, r) = layer.forward_token(&x);
    assert_eq!(r.weights, vec![1.0]);
    assert_eq!(y, layer.experts[0].forward(&x));
}

#[test]
fn identical_experts_ignore_routing() {
    let base = random_model(24, 1, 4, 5, 6, 2, 2);
    let e = base.layers[0].experts[0].clone();
    let layer = MoELayer::new(base.layers[0].gate.clone(), vec![e.clone(); 4], 2).unwrap();
    let x = [0.5, -1.0, 0.25, 0.0, 0.7];
    let (y, _) = layer.forward_token(&x);
    assert!(rel_diff(&y, &e.forward(&x)) < 1e-14);
}

#[test]
fn routing_invariant_to_positive_logit_scale_argmax() {
    let logits = [0.3, -1.2, 2.5, 0.9, 2.4];
    let a = route_logits(&logits, 2);
    let scaled: Vec<f64> = logits.iter().map(|l| l * 7.5).collect();
    let b = route_logits(&scaled, 2);
    assert_eq!(a.experts, b.experts);
}

#[test]
fn batch_forward_and_capture_agree_with_token_loop() {
    let model = random_model(25, 2, 4, 5, 8, 2, 3);
    let mut r = rng(26);
    let x = uniform(&mut r, 5, 30, 1.0);
    let (logits, traces) = moe_forward_dense(&model, &x).unwrap();
    let cal = capture_calibration(&model, &x).unwrap();
    assert_eq!(cal.len(), 2);
    for j in 0..30 {
        let (l, routes) = model.forward_token(&x.col(j));
        assert_eq!(logits.col(j), l);
        for (layer, route) in routes.iter().enumerate() {
            assert_eq!(&traces[layer].tokens[j], route);
            assert_eq!(&cal[layer].trace.tokens[j], route);
        }
    }
    // Gram oracle for layer 0: sum of outer products over the routed tokens.
    let layer = &model.layers[0];
    for i in 0..4 {
        let mut g_up = Matrix::zeros(5, 5);
        let mut g_down = Matrix::zeros(8, 8);
        let mut count = 0;
        for j in 0..30 {
            let xj = x.col(j);
            if cal[0].trace.tokens[j].experts.contains(&i) {
                count += 1;
                let hid: Vec<f64> = layer.experts[i].up.matvec(&xj).into_iter().map(silu).collect();
                for a in 0..5 {
                    for b in 0..5 {
                        g_up[(a, b)] += xj[a] * xj[b];
                    }
                }
                for a in 0..8 {
                    for b in 0..8 {
                        g_down[(a, b)] += hid[a] * hid[b];
                    }
                }
            }
        }
        assert_eq!(cal[0].grams[i].tokens, count);
        assert!(cal[0].grams[i].up.sub(&g_up).unwrap().max_abs() < 1e-12);
        assert!(cal[0].grams[i].down.sub(&g_down).unwrap().max_abs() < 1e-12);
    }
    let f = expert_frequency(&cal[0].trace);
    assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // Second layer sees the first layer's outputs.
    for j in 0..30 {
        let (y, _) = layer.forward_token(&x.col(j));
        assert_eq!(cal[1].inputs.col(j), y);
    }
}

#[test]
fn invalid_shapes_rejected() {
    let e = Expert { up: Matrix::zeros(3, 2), down: Matrix::zeros(2, 3) };
    assert!(MoELayer::new(Matrix::zeros(2, 2), vec![e.clone()], 1).is_err());
    assert!(MoELayer::new(Matrix::zeros(1, 2), vec![e.clone()], 2).is_err());
    let bad = Expert { up: Matrix::zeros(3, 2), down: Matrix::zeros(3, 3) };
    assert!(MoELayer::new(Matrix::zeros(2, 2), vec![e.clone(), bad], 1).is_err());
    let layer = MoELayer::new(Matrix::zeros(1, 2), vec![e], 1).unwrap();
    assert!(MoEModel::new(vec![layer.clone()], Matrix::zeros(3, 5)).is_err());
    assert!(MoEModel::new(vec![layer], Matrix::zeros(1, 2)).is_err());
}

proptest! {
    #[test]
    fn gate_weights_sum_to_one(seed in any::<u64>(), n in 1usize..=8, k_off in 0usize..8) {
        let k = 1 + k_off % n;
        let model = random_model(seed, 1, n, 4, 3, k, 2);
        let mut r = rng(seed ^ 1);
        let x = uniform(&mut r, 4, 1, 3.0).col(0);
        let g = model.layers[0].gate_weights(&x);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(g.iter().filter(|&&v| v > 0.0).count(), k);
        prop_assert!(g.iter().all(|&v| v >= 0.0));
    }
}

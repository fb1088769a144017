//! Central finite-difference oracle for network gradients (64-bit).

#![allow(dead_code)]

use crimemap_nn::{ArchSpec, LayerSpec, Network, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;

/// |a - n| / max(|a|, |n|); gradients below 1e-7 in magnitude on both sides count as agreeing.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        return 0.0;
    }
    (a - n).abs() / scale
}

pub fn random_net(arch: ArchSpec, rng: &mut ChaCha8Rng) -> Network<f64> {
    let mut net = Network::<f64>::zeros(arch).unwrap();
    for p in &mut net.params {
        for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    net
}

/// Inputs whose values are pairwise separated by more than 2*EPS and stay away from 0,
/// so ReLU and max-pool selections cannot flip under perturbation.
pub fn separated_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut levels: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * 0.01 + 0.02).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    levels
        .into_iter()
        .map(|v| if rng.random_bool(0.5) { v } else { -v })
        .collect()
}

pub fn max_param_error(net: &Network<f64>, batch: &[(&[f64], usize)]) -> f64 {
    let analytic = net.loss_and_gradients(batch).unwrap().grads;
    let mut worst = 0f64;
    for li in 0..net.params.len() {
        for which in 0..2 {
            let len = if which == 0 {
                net.params[li].weights.len()
            } else {
                net.params[li].bias.len()
            };
            for k in 0..len {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let (vp, vm) = if which == 0 {
                    (&mut plus.params[li].weights[k], &mut minus.params[li].weights[k])
                } else {
                    (&mut plus.params[li].bias[k], &mut minus.params[li].bias[k])
                };
                *vp += EPS;
                *vm -= EPS;
                let numeric =
                    (plus.batch_loss(batch).unwrap() - minus.batch_loss(batch).unwrap()) / (2.0 * EPS);
                let a = if which == 0 {
                    analytic[li].weights[k]
                } else {
                    analytic[li].bias[k]
                };
                worst = worst.max(rel_err(a, numeric));
            }
        }
    }
    worst
}

pub fn max_input_error(net: &Network<f64>, x: &[f64], label: usize) -> f64 {
    let bp = net.backprop(x, label, true).unwrap();
    let g = bp.input_grad.unwrap();
    let mut worst = 0f64;
    for k in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += EPS;
        xm[k] -= EPS;
        let numeric = (net.example_loss(&xp, label).unwrap() - net.example_loss(&xm, label).unwrap())
            / (2.0 * EPS);
        worst = worst.max(rel_err(g[k], numeric));
    }
    worst
}

pub fn case_arch(kind: usize, rng: &mut ChaCha8Rng) -> ArchSpec {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(4..=7);
    let w = rng.random_range(4..=7);
    let classes = rng.random_range(2..=4);
    let input = Shape::Map { c, h, w };
    let head = LayerSpec::SoftmaxOutput { classes };
    let layers = match kind {
        0 => {
            let kernel = rng.random_range(1..=3);
            vec![
                LayerSpec::Conv {
                    filters: rng.random_range(1..=3),
                    kernel,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..kernel),
                },
                LayerSpec::Flatten,
                head,
            ]
        }
        1 => vec![LayerSpec::Relu, LayerSpec::Flatten, head],
        2 => vec![
            LayerSpec::MaxPool {
                window: 2,
                stride: rng.random_range(1..=2),
            },
            LayerSpec::Flatten,
            head,
        ],
        3 => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: rng.random_range(1..=6),
            },
            head,
        ],
        _ => vec![LayerSpec::Flatten, head],
    };
    ArchSpec { input, layers }
}

pub const LAYER_TYPES: [&str; 5] = ["conv", "relu", "maxpool", "dense", "flatten+softmax_output"];

/// Worst relative error per layer type over `cases` fuzzed shapes, covering
/// parameter and input gradients.
pub fn layer_type_errors(seed: u64, cases: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (kind, name) in LAYER_TYPES.iter().enumerate() {
        let mut worst = 0f64;
        for _ in 0..cases {
            let arch = case_arch(kind, &mut rng);
            let net = random_net(arch, &mut rng);
            let n = net.input_len();
            let classes = net.classes();
            let x1 = separated_input(n, &mut rng);
            let x2 = separated_input(n, &mut rng);
            let (y1, y2) = (rng.random_range(0..classes), rng.random_range(0..classes));
            let batch = [(x1.as_slice(), y1), (x2.as_slice(), y2)];
            worst = worst.max(max_param_error(&net, &batch));
            worst = worst.max(max_input_error(&net, &x1, y1));
        }
        out.push((*name, worst));
    }
    out
}

//! Independent oracles shared by the integration tests. Nothing here calls
//! the library routine it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use nac_core::{Activation, Dense, DenseNet};
use rand::Rng;

/// Random ReLU network with 1-3 hidden layers, every hidden layer tapped,
/// and non-zero biases.
pub fn random_net<R: Rng>(rng: &mut R) -> DenseNet {
    let dims = rng.random_range(2..=6);
    let hidden = rng.random_range(1..=3);
    let classes = rng.random_range(2..=6);
    let mut widths = vec![dims];
    for _ in 0..hidden {
        widths.push(rng.random_range(3..=12));
    }
    widths.push(classes);
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let scale = (2.0 / w[0] as f32).sqrt();
            let weights = (0..w[0] * w[1])
                .map(|_| rng.random_range(-1.0..1.0) * scale)
                .collect();
            let biases = (0..w[1]).map(|_| rng.random_range(-0.3..0.3)).collect();
            let act = if i + 2 == widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            Dense::new(w[0], w[1], weights, biases, act).unwrap()
        })
        .collect();
    DenseNet::new(layers, (0..hidden).collect()).unwrap()
}

pub fn random_input<R: Rng>(rng: &mut R, dims: usize) -> Vec<f32> {
    (0..dims).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Forward pass through layers `from..` starting from `input`. Returns the
/// logits and the smallest |pre-activation| seen at a ReLU.
pub fn forward_from(net: &DenseNet, from: usize, input: &[f64]) -> (Vec<f64>, f64) {
    let mut v = input.to_vec();
    let mut closest_kink = f64::INFINITY;
    for layer in &net.layers()[from..] {
        let mut next = Vec::with_capacity(layer.outputs);
        for o in 0..layer.outputs {
            let mut acc = layer.biases[o] as f64;
            for i in 0..layer.inputs {
                acc += layer.weights[o * layer.inputs + i] as f64 * v[i];
            }
            if layer.activation == Activation::Relu {
                closest_kink = closest_kink.min(acc.abs());
                acc = acc.max(0.0);
            }
            next.push(acc);
        }
        v = next;
    }
    (v, closest_kink)
}

/// Output of hidden layer `layer` for input `x`.
pub fn hidden_output(net: &DenseNet, x: &[f32], layer: usize) -> Vec<f64> {
    let mut v: Vec<f64> = x.iter().map(|&a| a as f64).collect();
    for l in &net.layers()[..=layer] {
        let mut next = Vec::with_capacity(l.outputs);
        for o in 0..l.outputs {
            let mut acc = l.biases[o] as f64;
            for i in 0..l.inputs {
                acc += l.weights[o * l.inputs + i] as f64 * v[i];
            }
            if l.activation == Activation::Relu {
                acc = acc.max(0.0);
            }
            next.push(acc);
        }
        v = next;
    }
    v
}

/// `D_KL(u ‖ softmax(logits)) = Σ u·(ln u − ln p)` with a stable log-softmax.
pub fn kl_to_uniform(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let c = logits.len() as f64;
    logits
        .iter()
        .map(|l| (1.0 / c) * (-(c.ln()) - (l - lse)))
        .sum()
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], i: usize, h: f64) -> f64 {
    let mut p = at.to_vec();
    let mut m = at.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// `|a − b| ≤ rel·max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

/// Linear-scan bin lookup: half-open bins, the last one closed.
pub fn brute_bin(edges: &[f64], v: f64) -> usize {
    let m = edges.len() - 1;
    for k in 0..m {
        if v >= edges[k] && (v < edges[k + 1] || (k == m - 1 && v <= edges[m])) {
            return k;
        }
    }
    panic!("value {v} outside [{}, {}]", edges[0], edges[m]);
}

/// `neurons × bins` counts of row-major `values`.
pub fn brute_counts(edges: &[f64], neurons: usize, values: &[f64]) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; edges.len() - 1]; neurons];
    for (i, &v) in values.iter().enumerate() {
        counts[i % neurons][brute_bin(edges, v)] += 1;
    }
    counts
}

/// Pairwise AUROC: `(wins + ½ ties) / (n·m)`.
pub fn brute_auroc(ind: &[f64], ood: &[f64]) -> f64 {
    let (mut twice, n) = (0u64, (ind.len() * ood.len()) as u64);
    for &a in ind {
        for &b in ood {
            if a > b {
                twice += 2;
            } else if a == b {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * n) as f64
}

/// Closed-form Spearman for distinct values.
pub fn closed_form_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64], i: usize| v.iter().filter(|&&o| o < v[i]).count() as f64 + 1.0;
    let n = x.len() as f64;
    let d2: f64 = (0..x.len())
        .map(|i| {
            let d = rank(x, i) - rank(y, i);
            d * d
        })
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

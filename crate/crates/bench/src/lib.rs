//! Shared fixtures for the benchmarks.

use nac_core::{DenseNet, NeuronStateMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × neurons` states drawn uniformly from (0, 1).
pub fn random_states(rows: usize, neurons: usize, seed: u64) -> NeuronStateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * neurons)
        .map(|_| rng.random_range(1e-6..1.0 - 1e-6))
        .collect();
    NeuronStateMatrix::new("layer0", rows, neurons, values, 100.0).expect("valid states")
}

/// A randomly initialised `widths` network tapping every hidden layer.
pub fn random_net(widths: &[usize], seed: u64) -> DenseNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taps = (0..widths.len() - 2).collect();
    DenseNet::init(widths, taps, &mut rng).expect("valid widths")
}

/// Random inputs for `net`.
pub fn random_inputs(dims: usize, rows: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..dims).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

//! Deterministic inputs shared by the benchmarks.

use hubless_core::dataio::{generate_synthetic, SynthSpec, SyntheticData};
use hubless_core::projector::{init_weights, DEFAULT_HIDDEN};
use hubless_core::{Matrix, MlpWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Default-architecture network for `d`-dimensional semantics and
/// `m`-dimensional features.
pub fn default_net(d: usize, m: usize) -> MlpWeights {
    init_weights(d, &DEFAULT_HIDDEN, m, 1).expect("valid dims")
}

/// The default synthetic dataset (30 seen, 10 unseen classes).
pub fn default_data() -> SyntheticData {
    generate_synthetic(&SynthSpec::default()).expect("valid spec")
}

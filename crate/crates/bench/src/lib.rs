//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybridcrop::assignment::{CostMatrix, TrainExample};
use hybridcrop::dataio::generate_synthetic;
use hybridcrop::decoder::ModelConfig;
use hybridcrop::experiment::{scenes_to_examples, McabMode};

pub fn cost_matrix(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(0.0..4.0)).collect())
        .collect();
    CostMatrix::from_rows(&rows).expect("finite square matrix")
}

/// Synthetic desk-scale examples with the average-fused prior.
pub fn desk_examples(n: usize) -> Vec<TrainExample> {
    let cfg = ModelConfig::desk();
    let scenes = generate_synthetic(99, n, cfg.grid_h, 90);
    scenes_to_examples(&scenes, &cfg, McabMode::Average).expect("synthetic scenes fit the desk model")
}

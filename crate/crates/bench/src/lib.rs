//! Fixtures shared by the benchmarks.

use goalnca::{CellGrid, EncoderKind, GoalEncoder, NcaParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random state with every alpha above the alive threshold, so every cell does work.
pub fn busy_grid(channels: usize, side: usize, rng: &mut ChaCha8Rng) -> CellGrid {
    let plane = side * side;
    let mut data: Vec<f32> = (0..channels * plane).map(|_| rng.random_range(-1.0..1.0)).collect();
    for v in &mut data[3 * plane..4 * plane] {
        *v = rng.random_range(0.2..1.0);
    }
    CellGrid::from_data(channels, side, side, data).expect("shape is consistent")
}

pub fn model(channels: usize, n_goals: usize, rng: &mut ChaCha8Rng) -> (NcaParams, GoalEncoder) {
    let params = NcaParams::init(channels, rng);
    let encoder = GoalEncoder::init(EncoderKind::Mlp3, n_goals, channels - 4, rng);
    (params, encoder)
}

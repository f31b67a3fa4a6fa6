//! Shared fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skws::net::{Model, ModelConfig};

/// `channels` rows of uniform noise in [-0.5, 0.5).
pub fn noise(channels: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..channels)
        .map(|_| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect()
}

/// Full-size spatial model (six zones, yes/no/filler heads).
pub fn spatial_model(channels: usize) -> Model<f32> {
    let zones = if channels == 2 { 6 } else { 12 };
    Model::new(ModelConfig::spatial(channels, zones, 3, 2).expect("2 or 3 channels")).expect("valid preset")
}

//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdgan_core::imaging::{DomainImage, LabelMap};
use stdgan_core::networks::{ArchConfig, ModelWeights};
use stdgan_core::Tensor;

/// Uniform random `[3, size, size]` raster.
pub fn patch(size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, size, size], |_| rng.random::<f32>())
}

pub fn labels(size: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(
        size,
        size,
        (0..size * size).map(|_| rng.random_range(0..4u8)).collect(),
    )
    .unwrap()
}

pub fn image(size: usize, seed: u64) -> DomainImage {
    DomainImage::new(patch(size, seed), Some(labels(size, seed + 1)), 0).unwrap()
}

/// Translation model with the desk-scale width.
pub fn desk_model(n_domains: usize) -> ModelWeights<f32> {
    ModelWeights::new(
        ArchConfig::new(16, n_domains),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
}

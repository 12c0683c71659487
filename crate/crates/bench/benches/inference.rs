use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use stdgan_bench::{desk_model, image};
use stdgan_core::segmentation::{predict, SegConfig, SegmenterWeights};
use stdgan_core::standardizer::{standardize_image, StandardizationProfile, Tiling};

fn standardize(c: &mut Criterion) {
    let model = desk_model(3);
    let k = model.arch().embed_channels();
    let profile = StandardizationProfile {
        gamma_avg: vec![1.0; k],
        beta_avg: vec![0.0; k],
        source: String::new(),
        n_domains: 3,
    };
    let im = image(256, 5);
    let tiling = Tiling {
        patch_size: 64,
        overlap: 8,
    };
    c.bench_function("standardize 256px tile", |b| {
        b.iter(|| standardize_image(black_box(&im), &profile, &model, tiling).unwrap())
    });
}

fn segment(c: &mut Criterion) {
    let weights = SegmenterWeights::new(&SegConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0));
    let im = image(256, 6);
    c.bench_function("predict 256px tile", |b| {
        b.iter(|| predict(black_box(&im), &weights).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = standardize, segment
}
criterion_main!(benches);

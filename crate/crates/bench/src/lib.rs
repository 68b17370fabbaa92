//! Shared fixtures for the criterion benches.

use pointattn_core::attention::{Attention, AttentionConfig, AttentionKind};
use pointattn_core::bench::bench_reduction;
use pointattn_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform points in a 4 m cube.
pub fn cloud(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3], |_| rng.random_range(0.0..4.0))
}

pub fn features(n: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, c], |_| rng.random_range(-1.0..1.0))
}

/// A module with random weights plus matching input features and coordinates.
pub struct AttentionFixture {
    pub store: ParamStore<f32>,
    pub module: Attention,
    pub x: Tensor<f32>,
    pub coords: Tensor<f32>,
}

pub fn attention_fixture(kind: AttentionKind, n: usize, c: usize) -> AttentionFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = AttentionConfig::new(c).with_reduction(bench_reduction(c));
    let cfg = cfg.with_neighbors(cfg.neighbors.min(n));
    let mut store = ParamStore::new();
    let module = Attention::build(kind, cfg, &mut store, "bench", &mut rng)
        .expect("valid benchmark config")
        .expect("attention kind is not none");
    store.randomize(&mut rng, 0.1);
    AttentionFixture { store, module, x: features(n, c, 1), coords: cloud(n, 2) }
}

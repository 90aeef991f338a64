//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roadseg::adversarial::{stack_images, Model, ModelOptions};
use roadseg::data::{generate_scene, Domain, RoadScene};
use roadseg::metrics::SegMask;
use roadseg::pyramid::PyramidConfig;
use roadseg::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

pub fn scenes(domain: Domain, n: u64, size: usize) -> Vec<RoadScene> {
    let style = domain.style(size);
    (0..n).map(|i| generate_scene(i, domain, &style, size).expect("valid scene")).collect()
}

/// Desk model, fresh parameters and a batch of `n` source images.
pub fn desk_model(n: u64) -> (Model, ParamStore<f32>, Tensor<f32>) {
    let model = Model::new(&PyramidConfig::desk(), &ModelOptions::desk()).expect("desk model");
    let store = model.init(7).expect("init");
    let images = stack_images(&scenes(Domain::Source, n, model.input_size())).expect("stack");
    (model, store, images)
}

/// Two-label masks from scene geometry.
pub fn masks(n: u64, size: usize) -> Vec<SegMask> {
    scenes(Domain::Source, n, size).into_iter().map(|s| s.mask).collect()
}

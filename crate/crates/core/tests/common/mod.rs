#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tslab_autodiff::{Real, Tensor};
use tslab_core::data::Sample;
use tslab_core::model::{Extras, ModelConfig, ModelWeights};

/// 8x8 images, 2x2 patches (16 tokens), 3 blocks, 2 heads.
pub fn small() -> ModelConfig {
    ModelConfig {
        depth: 3,
        embed_dim: 8,
        heads: 2,
        image_size: 8,
        patch_size: 2,
        channels: 3,
        num_classes: 4,
        mlp_ratio: 2,
    }
}

pub fn weights<F: Real>(cfg: &ModelConfig, seed: u64) -> ModelWeights<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelWeights::init(cfg, Extras { halting: true, decisions: true }, &mut rng)
}

/// Weights whose attention is far from uniform, so ATS actually drops
/// tokens, and whose patch embedding is strong enough to matter.
pub fn peaky<F: Real>(cfg: &ModelConfig, seed: u64) -> ModelWeights<F> {
    let mut w: ModelWeights<F> = weights(cfg, seed);
    let boost = |t: &mut Tensor<F>, k: f64| t.data_mut().iter_mut().for_each(|v| *v = *v * F::of(k));
    boost(&mut w.patch_w, 40.0);
    boost(&mut w.pos_embed, 20.0);
    for b in &mut w.blocks {
        boost(&mut b.wq, 60.0);
        boost(&mut b.wk, 60.0);
        boost(&mut b.wv, 30.0);
        boost(&mut b.w1, 20.0);
        boost(&mut b.w2, 20.0);
    }
    w
}

pub fn image<F: Real>(cfg: &ModelConfig, seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = cfg.image_shape();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| F::of(rng.random_range(0.0..1.0))).collect()).unwrap()
}

pub fn samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample { id: i as u64, label: i % cfg.num_classes, image: image(cfg, seed * 1000 + i as u64) })
        .collect()
}

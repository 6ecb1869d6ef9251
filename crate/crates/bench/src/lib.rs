//! Shared fixtures for the benchmarks.

use dact_core::attention::{AttentionConfig, AttentionParams, KeyMeanMode};
use dact_core::corpus::{gen_synthetic, SyntheticSpec};
use dact_core::{Corpus, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

pub fn attention(model_dim: usize, max_len: usize) -> AttentionParams {
    let config = AttentionConfig {
        model_dim,
        heads: 4,
        head_dim: model_dim / 4,
        max_len,
        center_bound: 3.0,
        deviation_scale: max_len as f64,
        key_mean: KeyMeanMode::FeatureMean,
    };
    AttentionParams::init(config, &mut rng()).expect("valid attention config")
}

pub fn utterances(n: usize, dim: usize) -> Tensor {
    Tensor::uniform(&[n, dim], 1.0, &mut rng())
}

pub fn small_corpus() -> Corpus {
    gen_synthetic(&SyntheticSpec {
        train_dialogues: 8,
        valid_dialogues: 0,
        test_dialogues: 4,
        ..Default::default()
    })
    .expect("default spec is valid")
    .corpus
}

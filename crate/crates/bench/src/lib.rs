//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprint_core::{Model, ModelConfig, TokenId, TokenSequence, TokenVocabulary};

/// The toy model used for decoding benchmarks: about 200k parameters.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 4,
        d_ff: 128,
        vocab: TokenVocabulary::build(200, 64, &[256, 512]).expect("static vocabulary"),
        block_size: 8,
        rope_base: 10000.0,
        moe: None,
    }
}

pub fn toy_model(seed: u64) -> Model {
    Model::init(toy_config(), seed).expect("valid config")
}

pub fn random_prompt(model: &Model, len: usize, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = &model.config.vocab;
    let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..vocab.text_size() as TokenId)).collect();
    TokenSequence::from_ids(vocab, ids, model.config.block_size).expect("text ids")
}

/// `(id, length)` pairs with lengths uniform in `1..=max`.
pub fn random_lengths(n: usize, max: usize, seed: u64) -> Vec<(u64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64).map(|i| (i, rng.random_range(1..=max))).collect()
}

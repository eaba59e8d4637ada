use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprint_core::model::build_block_mask;
use sprint_core::{MoEConfig, Model, ModelConfig, TokenId, TokenVocabulary};

fn config(moe: bool) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        vocab: TokenVocabulary::build(20, 6, &[256]).unwrap(),
        block_size: 4,
        rope_base: 10000.0,
        moe: moe.then(|| MoEConfig::new(4, 2, 8)),
    }
}

/// Random block-boundary cut points, always ending at `len`.
fn random_split(len: usize, block: usize, prompt_len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let layout = sprint_core::BlockLayout::new(block, prompt_len);
    let mut bounds: Vec<usize> = (1..len).filter(|&p| layout.block_of(p) != layout.block_of(p - 1)).collect();
    bounds.retain(|_| rng.random_bool(0.5));
    bounds.push(len);
    bounds
}

#[test]
fn chunked_forward_matches_monolithic_on_random_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let moe = trial % 2 == 1;
        let model = Model::init_scaled(config(moe), trial, 0.3).unwrap();
        let prompt_len = rng.random_range(0..6);
        let len = prompt_len + 4 * rng.random_range(1..5);
        let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..model.config.vocab_size() as TokenId)).collect();
        let pos: Vec<usize> = (0..len).collect();
        let mask = build_block_mask(len, 4, prompt_len);
        let full = model.forward(&ids, &pos, None, &mask).unwrap().logits;

        let mut cache = None;
        let mut start = 0;
        for end in random_split(len, 4, prompt_len, &mut rng) {
            let (logits, next) =
                model.forward_extend(&ids[start..end], &pos[start..end], cache.as_ref(), &mask).unwrap();
            for r in 0..end - start {
                for (a, b) in full.row(start + r).iter().zip(logits.row(r)) {
                    worst = worst.max((a - b).abs());
                }
            }
            cache = Some(next);
            start = end;
        }
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

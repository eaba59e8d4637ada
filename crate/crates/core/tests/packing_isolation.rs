use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprint_core::model::build_block_mask;
use sprint_core::packing::{aligned_length, materialize};
use sprint_core::{pack, segment_mask, Model, ModelConfig, TokenId, TokenSequence, TokenVocabulary};

#[test]
fn packed_samples_match_standalone_forwards() {
    let vocab = TokenVocabulary::build(20, 0, &[]).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        vocab: vocab.clone(),
        block_size: 4,
        rope_base: 10000.0,
        moe: None,
    };
    let model = Model::init_scaled(cfg, 3, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let seqs: Vec<TokenSequence> = (0..rng.random_range(2..7))
            .map(|_| {
                let len = aligned_length(rng.random_range(1..12), 4);
                let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..20)).collect();
                TokenSequence::from_ids(&vocab, ids, 4).unwrap()
            })
            .collect();
        let lengths: Vec<(u64, usize)> = seqs.iter().enumerate().map(|(i, s)| (i as u64, s.len())).collect();
        let by_id: HashMap<u64, &TokenSequence> = seqs.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
        for packed in pack(&lengths, 24).unwrap() {
            let ids = materialize(&packed, &by_id, &vocab, vocab.eos_id()).unwrap();
            let pos: Vec<usize> = (0..packed.capacity).collect();
            let out = model.forward(ids.ids(), &pos, None, &segment_mask(&packed, 4)).unwrap().logits;
            for seg in &packed.segments {
                let s = by_id[&seg.sample_id];
                let alone_pos: Vec<usize> = (0..s.len()).collect();
                let alone = model.forward(s.ids(), &alone_pos, None, &build_block_mask(s.len(), 4, 0)).unwrap().logits;
                for r in 0..s.len() {
                    for (a, b) in out.row(seg.offset + r).iter().zip(alone.row(r)) {
                        // rotary attention depends only on relative offsets
                        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                    }
                }
            }
        }
    }
}

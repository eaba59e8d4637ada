use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprint_core::model::LayerKv;
use sprint_core::sprint::score_prefix;
use sprint_core::{Matrix, Modality, PrefixCache, PruneConfig};

fn naive_records(keys: &[Matrix], logits: &Matrix, alpha: f64) -> Vec<(f64, f64, f64)> {
    let n = logits.rows();
    let mut norms = vec![0.0; n];
    for k in keys {
        for (i, norm) in norms.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..k.cols() {
                s += k.get(i, j) * k.get(i, j);
            }
            *norm += s.sqrt() / keys.len() as f64;
        }
    }
    let mean: f64 = norms.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let conf = 1.0 / z;
            let imp = norms[i] / mean;
            (imp, conf, alpha * imp + (1.0 - alpha) * conf)
        })
        .collect()
}

#[test]
fn score_prefix_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (n, d, layers, vocab) = (rng.random_range(1..40), 8, rng.random_range(1..4), rng.random_range(2..30));
        let keys: Vec<Matrix> = (0..layers).map(|_| Matrix::uniform(n, d, 2.0, &mut rng)).collect();
        let kv =
            keys.iter().map(|k| LayerKv { keys: k.clone(), values: Matrix::uniform(n, d, 1.0, &mut rng) }).collect();
        let mut cache = PrefixCache::empty(layers, d);
        cache.append(&(0..n).collect::<Vec<_>>(), kv).unwrap();
        let logits = Matrix::uniform(n, vocab, 6.0, &mut rng);
        let mods: Vec<Modality> = (0..n).map(|i| if i % 3 == 0 { Modality::Image } else { Modality::Text }).collect();
        let cfg = PruneConfig { alpha: rng.random(), ..PruneConfig::default() };
        let got = score_prefix(&cache, &logits, &mods, n, &cfg).unwrap();
        for (r, (imp, conf, score)) in got.iter().zip(naive_records(&keys, &logits, cfg.alpha)) {
            assert!((r.key_norm_importance - imp).abs() < 1e-12);
            assert!((r.confidence - conf).abs() < 1e-12);
            assert!((r.score - score).abs() < 1e-12);
        }
    }
}

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprint_bench::{random_lengths, random_prompt, toy_model};
use sprint_core::model::build_block_mask;
use sprint_core::{generate, pack, DecodeConfig, PruneConfig, UnmaskPolicy};

fn forward(c: &mut Criterion) {
    let model = toy_model(0);
    let mut group = c.benchmark_group("forward");
    for len in [16, 64] {
        let prompt = random_prompt(&model, len, 1);
        let pos: Vec<usize> = (0..len).collect();
        let mask = build_block_mask(len, model.config.block_size, 0);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| model.forward(black_box(prompt.ids()), &pos, None, &mask).unwrap())
        });
    }
    group.finish();
}

fn decode(c: &mut Criterion) {
    let model = toy_model(0);
    let prompt = random_prompt(&model, 32, 2);
    let variants = [
        ("baseline", DecodeConfig::baseline(4, UnmaskPolicy::fixed(8))),
        ("sprint_full", DecodeConfig::sprint(4, UnmaskPolicy::fixed(8), PruneConfig::full())),
        ("sprint_pruned", DecodeConfig::sprint(4, UnmaskPolicy::fixed(8), PruneConfig::default())),
    ];
    let mut group = c.benchmark_group("generate");
    group.sample_size(20);
    for (name, cfg) in &variants {
        group.bench_function(*name, |b| {
            b.iter(|| generate(&model, &prompt, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap())
        });
    }
    group.finish();
}

fn packing(c: &mut Criterion) {
    let lengths = random_lengths(10_000, 512, 3);
    c.bench_function("pack_10k", |b| b.iter(|| pack(black_box(&lengths), 1024).unwrap()));
}

criterion_group!(benches, forward, decode, packing);
criterion_main!(benches);

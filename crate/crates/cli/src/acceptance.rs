//! The acceptance checks. Each returns an [`Outcome`] instead of panicking so
//! the runner can report every criterion.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprint_core::corpus::{self, Sample};
use sprint_core::gradcheck::{loss_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use sprint_core::model::{build_block_mask, LayerKv};
use sprint_core::objectives::{bdlm_loss_value, complementary_pair, UniformDenoiser};
use sprint_core::packing::{naive_padding, total_padding};
use sprint_core::sprint::{score_prefix, select_unmask};
use sprint_core::vocab::VocabSpec;
use sprint_core::{
    pack, BlockLayout, DecodePath, MaskedBatch, Matrix, MoEConfig, Modality, Model, ModelConfig, NoiseSchedule,
    PrefixCache, PruneConfig, TokenId, TokenSequence, TokenVocabulary, UnmaskPolicy,
};

use crate::commands::{self, ReplayStatus};
use crate::config::{toy_model_config, ModelSpec, RunConfig, Variant};
use crate::report::{self, CommandResult, GenerateRecord, RunReport};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl Outcome {
    pub fn line(&self) -> String {
        let budget = self.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        format!(
            "[{}] {:>2} {:<26} {:>8.2}s{budget}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

type Check = fn() -> anyhow::Result<(bool, String)>;

pub const CRITERIA: [(usize, &str, Option<u64>, Check); 13] = [
    (1, "no-op equivalence", Some(60), noop_equivalence),
    (2, "termination", Some(60), termination),
    (3, "nfe arithmetic", None, nfe_arithmetic),
    (4, "constructed speedup", Some(120), constructed_speedup),
    (5, "cache vs recompute", None, cache_vs_recompute),
    (6, "gradient oracles", None, gradient_oracles),
    (7, "analytic loss value", None, analytic_loss),
    (8, "complementary masking", None, complementary_masking),
    (9, "load balancing", Some(10), load_balancing),
    (10, "packing", None, packing),
    (11, "importance-score oracle", None, score_oracle),
    (12, "flow distillation", Some(300), flow_distillation),
    (13, "determinism", None, determinism),
];

/// Runs one criterion; errors count as failures and over-budget runs fail.
pub fn run(id: usize) -> Outcome {
    let (id, name, budget, check) = CRITERIA[id - 1];
    let budget = budget.map(Duration::from_secs);
    let started = Instant::now();
    let (mut passed, mut detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    let elapsed = started.elapsed();
    if let Some(b) = budget.filter(|&b| elapsed > b) {
        passed = false;
        detail = format!("over budget ({}s); {detail}", b.as_secs());
    }
    Outcome { id, name, passed, detail, elapsed, budget }
}

pub fn run_all() -> Vec<Outcome> {
    (1..=CRITERIA.len()).map(run).collect()
}

fn variant(label: &str, path: DecodePath, policy: UnmaskPolicy, prune: PruneConfig) -> Variant {
    Variant { label: label.into(), path, policy, prune, temperature: None }
}

fn records(reports: &[RunReport], label: &str) -> Vec<GenerateRecord> {
    reports
        .iter()
        .filter_map(|r| match &r.result {
            CommandResult::Generate(g) if g.label == label => Some(g.clone()),
            _ => None,
        })
        .collect()
}

fn noop_equivalence() -> anyhow::Result<(bool, String)> {
    let mut cfg = RunConfig::default();
    cfg.generate.runs = 50;
    cfg.generate.n_blocks = 4;
    cfg.generate.variants = vec![
        variant("baseline", DecodePath::Baseline, UnmaskPolicy::fixed(8), PruneConfig::full()),
        variant("sprint", DecodePath::Sprint, UnmaskPolicy::adaptive(1.5, 8), PruneConfig::full()),
    ];
    let reports = commands::generate(&cfg, 100, 1)?;
    let (a, b) = (records(&reports, "baseline"), records(&reports, "sprint"));
    let params = a.first().map_or(0, |g| g.num_params);
    let diverged = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| {
            x.tokens != y.tokens || x.acceptances != y.acceptances || x.per_block_steps != y.per_block_steps
        })
        .count();
    let ok = a.len() == 50 && b.len() == 50 && diverged == 0;
    Ok((ok, format!("{} runs, {params} params, {diverged} runs differ", a.len())))
}

fn termination() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0usize;
    let mut failures = 0usize;
    let taus = [0.0, 0.5, 0.93, 0.95, 1.5];
    for &tau in &taus {
        for _ in 0..10_000 {
            let block: usize = rng.random_range(1..=32);
            let total: usize = rng.random_range(1..=block);
            let policy = UnmaskPolicy::adaptive(tau, total);
            let mut masked: Vec<usize> = (0..block).collect();
            let mut steps = 0;
            while !masked.is_empty() && steps < total {
                let conf: Vec<f64> = masked
                    .iter()
                    .map(|_| match rng.random_range(0..8) {
                        0 => tau,
                        1 => 0.0,
                        2 => 1.0,
                        _ => rng.random(),
                    })
                    .collect();
                let accept = select_unmask(&conf, &policy, total - steps);
                let distinct = accept.windows(2).all(|w| w[0] < w[1]) && accept.iter().all(|&i| i < masked.len());
                if accept.is_empty() || !distinct {
                    failures += 1;
                    break;
                }
                for &i in accept.iter().rev() {
                    masked.remove(i);
                }
                steps += 1;
            }
            if !masked.is_empty() {
                failures += 1;
            }
            worst = worst.max(steps);
        }
    }
    Ok((failures == 0, format!("{} streams, {failures} failed to drain, max steps {worst}", taus.len() * 10_000)))
}

fn nfe_arithmetic() -> anyhow::Result<(bool, String)> {
    let mut cfg = RunConfig::default();
    cfg.generate.runs = 3;
    let mut checked = 0;
    let mut bad = Vec::new();
    for (blocks, steps) in [(4, 8), (4, 4), (2, 8), (3, 1)] {
        cfg.generate.n_blocks = blocks;
        cfg.generate.variants = vec![
            variant("baseline", DecodePath::Baseline, UnmaskPolicy::fixed(steps), PruneConfig::full()),
            variant("sprint", DecodePath::Sprint, UnmaskPolicy::fixed(steps), PruneConfig::full()),
        ];
        for r in commands::generate(&cfg, 7, 1)? {
            let CommandResult::Generate(g) = r.result else { continue };
            checked += 1;
            if g.nfe != (blocks * steps) as u64 {
                bad.push(format!("{} B={blocks} T={steps}: nfe {}", g.label, g.nfe));
            }
        }
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() { format!("{checked} generations, nfe = B*T in all") } else { bad.join("; ") },
    ))
}

fn copy_config(prune: PruneConfig) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelSpec::Copy {
        vocab: VocabSpec { text_size: 200, visual_size: 64, resolutions: vec![256, 512] },
        block_size: 16,
    };
    cfg.generate.runs = 20;
    cfg.generate.n_blocks = 4;
    cfg.generate.prompt_len = 16;
    cfg.generate.variants = vec![
        variant("fixed", DecodePath::Sprint, UnmaskPolicy::fixed(16), PruneConfig::full()),
        variant("adaptive", DecodePath::Sprint, UnmaskPolicy::adaptive(0.95, 16), prune),
    ];
    cfg
}

fn constructed_speedup() -> anyhow::Result<(bool, String)> {
    let cfg = copy_config(PruneConfig::default());
    let reports = commands::generate(&cfg, 40, 1)?;
    let c = commands::compare(&reports, Some("fixed"), &reports, Some("adaptive"))?;
    let ok = c.nfe_ratio <= 0.8 && c.agreement >= 0.98;
    Ok((ok, format!("{} runs, nfe ratio {:.4}, agreement {:.4}", c.pairs.len(), c.nfe_ratio, c.agreement)))
}

fn cache_vs_recompute() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut config: ModelConfig = toy_model_config();
        if trial % 2 == 1 {
            config.moe = Some(MoEConfig::new(4, 2, 32));
        }
        let block = config.block_size;
        let model = Model::init(config, trial)?;
        let prompt_len = rng.random_range(0..2 * block);
        let len = prompt_len + block * rng.random_range(1..5);
        let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..model.config.vocab_size() as TokenId)).collect();
        let pos: Vec<usize> = (0..len).collect();
        let mask = build_block_mask(len, block, prompt_len);
        let full = model.forward(&ids, &pos, None, &mask)?.logits;
        let layout = BlockLayout::new(block, prompt_len);
        let mut cuts: Vec<usize> = (1..len).filter(|&p| layout.block_of(p) != layout.block_of(p - 1)).collect();
        cuts.retain(|_| rng.random_bool(0.5));
        cuts.push(len);
        let mut cache: Option<PrefixCache> = None;
        let mut start = 0;
        for end in cuts {
            let (logits, next) = model.forward_extend(&ids[start..end], &pos[start..end], cache.as_ref(), &mask)?;
            for r in 0..end - start {
                for (a, b) in full.row(start + r).iter().zip(logits.row(r)) {
                    worst = worst.max((a - b).abs());
                }
            }
            cache = Some(next);
            start = end;
        }
    }
    Ok((worst < 1e-10, format!("100 splits (dense and MoE), max deviation {worst:.2e}")))
}

fn gradient_oracles() -> anyhow::Result<(bool, String)> {
    let rows = loss_suite(6, 12, DEFAULT_EPS, DEFAULT_TOLERANCE)?;
    let detail = rows
        .iter()
        .map(|r| format!("{} ({}p) {:.1e}", r.loss, r.params, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    let ok = rows.iter().all(|r| r.passed && r.params <= 1000);
    Ok((ok, detail))
}

fn analytic_loss() -> anyhow::Result<(bool, String)> {
    let vocab = TokenVocabulary::build(4, 0, &[])?;
    let x0 = TokenSequence::from_ids(&vocab, vec![0, 1, 1, 0], 2)?;
    let b = MaskedBatch::with_mask(&x0, 0, 0.5, vec![true, false, false, true], vocab.mask_id())?;
    let den = UniformDenoiser { vocab_size: 4, block_size: 2 };
    let loss = bdlm_loss_value(&den, &[b], &NoiseSchedule::linear())?;
    let expect = 4.0 * 4f64.ln();
    let err = (loss - expect).abs();
    Ok((err <= 1e-9, format!("loss {loss:.12}, 4 ln 4 = {expect:.12}, error {err:.1e}")))
}

fn complementary_masking() -> anyhow::Result<(bool, String)> {
    let vocab = TokenVocabulary::build(50, 10, &[256])?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let schedule = NoiseSchedule::linear();
    let mut bad = 0;
    for _ in 0..1000 {
        let block = rng.random_range(1..9);
        let prompt_len = rng.random_range(0..20);
        let len = prompt_len + rng.random_range(1..40);
        let ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..50)).collect();
        let x0 = TokenSequence::from_ids(&vocab, ids, block)?;
        let t = rng.random_range(0.01..1.0);
        let (a, b) = complementary_pair(&x0, prompt_len, t, &schedule, vocab.mask_id(), &mut rng)?;
        let ok = (0..len).all(|i| {
            let (x, y) = (a.mask_flags[i], b.mask_flags[i]);
            if i < prompt_len {
                !x && !y
            } else {
                x != y
            }
        });
        bad += usize::from(!ok);
    }
    Ok((bad == 0, format!("1000 pairs, {bad} with overlap or gaps")))
}

fn load_balancing() -> anyhow::Result<(bool, String)> {
    let cfg = RunConfig::default();
    let m = &cfg.moesim;
    anyhow::ensure!(
        m.gate_logits == [2.0, 0.0, 0.0, 0.0] && m.top_k == 1 && m.updates == 500 && m.update_rate == -0.01,
        "default simulation settings changed"
    );
    let CommandResult::Moesim(r) = commands::moesim(&cfg, 0)?.result else { unreachable!() };
    let min_load = r.final_load.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = r.final_gap < r.initial_gap && min_load >= 0.05;
    Ok((ok, format!("gap {:.4} -> {:.4}, min EMA load {min_load:.4}", r.initial_gap, r.final_gap)))
}

fn packing() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = Vec::new();
    let (mut pad, mut naive) = (0usize, 0usize);
    for trial in 0..100 {
        let capacity: usize = rng.random_range(8..200);
        let n: usize = rng.random_range(1..80);
        let skew = rng.random_range(0..3);
        let lengths: Vec<(u64, usize)> = (0..n)
            .map(|i| {
                let l = match skew {
                    0 => rng.random_range(1..=capacity),
                    1 => rng.random_range(1..=capacity.div_ceil(4)),
                    _ => capacity - rng.random_range(0..capacity.div_ceil(4)),
                };
                (i as u64 * 7 + 3, l)
            })
            .collect();
        let packed = pack(&lengths, capacity)?;
        let mut seen = HashSet::new();
        let mut layout_ok = true;
        for seq in &packed {
            let mut cursor = 0;
            for s in &seq.segments {
                layout_ok &= s.offset == cursor && seen.insert(s.sample_id);
                layout_ok &= lengths.iter().any(|&(id, l)| id == s.sample_id && l == s.length);
                cursor = s.end();
            }
            layout_ok &= cursor <= capacity && seq.capacity == capacity && seq.pad == capacity - cursor;
        }
        layout_ok &= seen.len() == n;
        let (p, q) =
            (total_padding(&packed), naive_padding(&lengths.iter().map(|l| l.1).collect::<Vec<_>>(), capacity));
        pad += p;
        naive += q;
        if !layout_ok || p > q {
            bad.push(format!("trial {trial}: layout {layout_ok}, padding {p} vs naive {q}"));
        }
    }
    let detail =
        if bad.is_empty() { format!("100 distributions, padding {pad} vs naive {naive}") } else { bad.join("; ") };
    Ok((bad.is_empty(), detail))
}

/// Mean per-layer key norms, normalized by their mean, mixed with the max
/// softmax probability, all written out longhand.
fn naive_scores(keys: &[Matrix], logits: &Matrix, alpha: f64) -> Vec<(f64, f64, f64)> {
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
    let mean = norms.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let imp = norms[i] / mean;
            (imp, 1.0 / z, alpha * imp + (1.0 - alpha) / z)
        })
        .collect()
}

fn score_oracle() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, d, layers, vocab) = (rng.random_range(1..64), 16, rng.random_range(1..5), rng.random_range(2..300));
        let keys: Vec<Matrix> = (0..layers).map(|_| Matrix::uniform(n, d, 2.0, &mut rng)).collect();
        let kv =
            keys.iter().map(|k| LayerKv { keys: k.clone(), values: Matrix::uniform(n, d, 1.0, &mut rng) }).collect();
        let mut cache = PrefixCache::empty(layers, d);
        cache.append(&(0..n).collect::<Vec<_>>(), kv)?;
        let logits = Matrix::uniform(n, vocab, 8.0, &mut rng);
        let mods: Vec<Modality> =
            (0..n).map(|_| if rng.random_bool(0.3) { Modality::Image } else { Modality::Text }).collect();
        let cfg = PruneConfig { alpha: rng.random(), ..PruneConfig::default() };
        let got = score_prefix(&cache, &logits, &mods, n, &cfg)?;
        for (r, (imp, conf, score)) in got.iter().zip(naive_scores(&keys, &logits, cfg.alpha)) {
            worst = worst.max((r.key_norm_importance - imp).abs());
            worst = worst.max((r.confidence - conf).abs());
            worst = worst.max((r.score - score).abs());
        }
    }
    Ok((worst <= 1e-12, format!("100 caches, max deviation {worst:.2e}")))
}

fn flow_distillation() -> anyhow::Result<(bool, String)> {
    let cfg = RunConfig::default();
    let CommandResult::Flow(f) = commands::flow(&cfg, 1)?.result else { unreachable!() };
    let per_code =
        f.report.per_code.iter().map(|c| format!("code {}: {:.3}", c.code, c.ratio)).collect::<Vec<_>>().join(", ");
    let ok = f.report.max_ratio() <= 2.0 && !f.report.per_code.is_empty();
    Ok((ok, format!("student/teacher energy-distance ratio {per_code} (limit 2)")))
}

fn scratch_dir() -> anyhow::Result<PathBuf> {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH)?.as_nanos();
    let dir = std::env::temp_dir().join(format!("sprint-acceptance-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn determinism() -> anyhow::Result<(bool, String)> {
    let dir = scratch_dir()?;
    let out = (|| {
        let mut cfg = RunConfig::default();
        cfg.generate.runs = 3;
        let mut sampled = variant("sampled", DecodePath::Sprint, UnmaskPolicy::default(), PruneConfig::default());
        sampled.temperature = Some(0.8);
        cfg.generate.variants.push(sampled);

        let vocab = TokenVocabulary::try_from(cfg.pack.vocab.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let samples = (0..40u64)
            .map(|id| {
                let len = rng.random_range(1..=cfg.pack.capacity);
                let ids = (0..len).map(|_| rng.random_range(0..vocab.text_size() as TokenId)).collect();
                Ok(Sample { id, tokens: TokenSequence::from_ids(&vocab, ids, cfg.pack.block_size)?, prompt_len: 0 })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let corpus_path = dir.join("corpus.jsonl");
        corpus::write(std::fs::File::create(&corpus_path)?, &samples)?;
        cfg.pack.corpus = Some(corpus_path);

        let mut reports = commands::generate(&cfg, 21, 2)?;
        reports.push(commands::gradcheck(&cfg, 21)?);
        reports.push(commands::moesim(&cfg, 21)?);
        reports.push(commands::pack(&cfg, 21)?);
        let mut short = cfg.clone();
        short.flow.train.teacher_steps = 40;
        short.flow.train.distill_steps = 40;
        short.flow.train.batch = 64;
        short.flow.train.pool_size = 256;
        short.flow.samples = 128;
        short.flow.resamplings = 2;
        reports.push(commands::flow(&short, 21)?);
        let path = dir.join("runs.jsonl");
        report::append(&path, &reports)?;
        let back = report::read(&path)?;
        anyhow::ensure!(back == reports, "reports did not survive the JSONL round trip");

        let outcomes = commands::replay(&back, 1)?;
        let identical = outcomes.iter().filter(|o| o.status == ReplayStatus::Identical).count();

        let mut tampered = back[0].clone();
        if let Some(c) = tampered.config.as_mut() {
            c.generate.n_blocks += 1;
        }
        let rejected = commands::replay_one(&tampered).is_err();

        let ok = identical == outcomes.len() && rejected;
        Ok((
            ok,
            format!("{identical}/{} reports replay identically, tampered config rejected: {rejected}", outcomes.len()),
        ))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    out
}

//! Command implementations. Each returns the reports it would persist.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use anyhow::Context as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprint_core::corpus::{self, Sample};
use sprint_core::flow::{distill_pipeline, evaluate};
use sprint_core::gradcheck::loss_suite;
use sprint_core::moe::simulate_fixed_stream;
use sprint_core::packing::{aligned_length, batch_max_padding, materialize, naive_padding, total_padding};
use sprint_core::{generate as decode, pack as ffd, DecodeConfig, TokenId, TokenSequence, TokenVocabulary};

use crate::config::{config_error, RunConfig, Variant};
use crate::report::{
    CommandResult, CompareRecord, FlowRecord, GenerateRecord, GradcheckRecord, MoeSimRecord, PackRecord, PairAgreement,
    RunReport,
};

/// Keeps the prompt stream independent of the sampling stream.
const PROMPT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64)
}

fn prompt_for(cfg: &RunConfig, vocab: &TokenVocabulary, block_size: usize, seed: u64) -> anyhow::Result<TokenSequence> {
    let ids = match &cfg.generate.prompt {
        Some(ids) => ids.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROMPT_SALT);
            (0..cfg.generate.prompt_len).map(|_| rng.random_range(0..vocab.text_size() as TokenId)).collect()
        }
    };
    TokenSequence::from_ids(vocab, ids, block_size).map_err(|e| config_error(format!("prompt: {e}")))
}

/// One run of one decoding variant.
pub fn generate_one(cfg: &RunConfig, seed: u64, run: usize, variant: &Variant) -> anyhow::Result<GenerateRecord> {
    let rs = run_seed(seed, run);
    let model = cfg.model.build(rs)?;
    let prompt = prompt_for(cfg, &model.config.vocab, model.config.block_size, rs)?;
    let dc = DecodeConfig {
        n_blocks: cfg.generate.n_blocks,
        policy: variant.policy,
        prune: variant.prune,
        path: variant.path,
        temperature: variant.temperature,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rs);
    let out =
        decode(&model, &prompt, &dc, &mut rng).with_context(|| format!("run {run}, variant {}", variant.label))?;
    Ok(GenerateRecord {
        label: variant.label.clone(),
        run,
        path: variant.path,
        num_params: model.num_params(),
        prompt: prompt.ids().to_vec(),
        tokens: out.generated(prompt.len()).to_vec(),
        nfe: out.nfe,
        attended: out.attended,
        wall_ns: out.wall_ns,
        per_block_steps: out.per_block_steps,
        acceptances: out.acceptances,
    })
}

fn pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

/// Every run under every variant, ordered by run then variant.
pub fn generate(cfg: &RunConfig, seed: u64, jobs: usize) -> anyhow::Result<Vec<RunReport>> {
    let fp = cfg.fingerprint();
    let runs: Vec<anyhow::Result<Vec<GenerateRecord>>> = pool(jobs)?.install(|| {
        (0..cfg.generate.runs)
            .into_par_iter()
            .map(|run| cfg.generate.variants.iter().map(|v| generate_one(cfg, seed, run, v)).collect())
            .collect()
    });
    let mut out = Vec::new();
    for recs in runs {
        for r in recs? {
            out.push(RunReport::new("generate", Some(cfg), fp.clone(), seed, CommandResult::Generate(r)));
        }
    }
    Ok(out)
}

fn generate_records<'a>(
    reports: &'a [RunReport],
    label: Option<&str>,
) -> anyhow::Result<BTreeMap<usize, &'a GenerateRecord>> {
    let recs: Vec<&GenerateRecord> = reports
        .iter()
        .filter_map(|r| match &r.result {
            CommandResult::Generate(g) if label.is_none_or(|l| g.label == l) => Some(g),
            _ => None,
        })
        .collect();
    let mut labels: Vec<&str> = recs.iter().map(|g| g.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() > 1 {
        return Err(config_error(format!("several variants {labels:?}; pick one with a label")));
    }
    let mut by_run = BTreeMap::new();
    for g in recs {
        if by_run.insert(g.run, g).is_some() {
            return Err(config_error(format!("run {} appears twice", g.run)));
        }
    }
    if by_run.is_empty() {
        return Err(config_error("no generate records selected"));
    }
    Ok(by_run)
}

fn first_divergence(a: &[TokenId], b: &[TokenId]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y).or((a.len() != b.len()).then(|| a.len().min(b.len())))
}

/// Agreement and cost ratios between two sets of generate records, paired
/// by run index. Ratios are `b / a`.
pub fn compare(
    a: &[RunReport],
    label_a: Option<&str>,
    b: &[RunReport],
    label_b: Option<&str>,
) -> anyhow::Result<CompareRecord> {
    let ra = generate_records(a, label_a)?;
    let rb = generate_records(b, label_b)?;
    let mut pairs = Vec::new();
    let (mut nfe, mut att, mut wall) = ([0u64; 2], [0u64; 2], [0u64; 2]);
    for (run, ga) in &ra {
        let Some(gb) = rb.get(run) else { continue };
        pairs.push(PairAgreement {
            run: *run,
            agreement: sprint_core::decoder::token_agreement(&ga.tokens, &gb.tokens),
            first_divergence: first_divergence(&ga.tokens, &gb.tokens),
        });
        for (acc, x, y) in
            [(&mut nfe, ga.nfe, gb.nfe), (&mut att, ga.attended, gb.attended), (&mut wall, ga.wall_ns, gb.wall_ns)]
        {
            acc[0] += x;
            acc[1] += y;
        }
    }
    if pairs.is_empty() {
        return Err(config_error("the two report sets share no run index"));
    }
    let ratio = |x: [u64; 2]| x[1] as f64 / x[0] as f64;
    Ok(CompareRecord {
        a: ra.values().next().map(|g| g.label.clone()).unwrap_or_default(),
        b: rb.values().next().map(|g| g.label.clone()).unwrap_or_default(),
        agreement: pairs.iter().map(|p| p.agreement).sum::<f64>() / pairs.len() as f64,
        pairs,
        nfe_ratio: ratio(nfe),
        attended_ratio: ratio(att),
        wall_ratio: ratio(wall),
    })
}

pub fn compare_report(
    a: &[RunReport],
    label_a: Option<&str>,
    b: &[RunReport],
    label_b: Option<&str>,
) -> anyhow::Result<RunReport> {
    let rec = compare(a, label_a, b, label_b)?;
    let mut fps: Vec<&str> = a.iter().chain(b).map(|r| r.fingerprint.as_str()).collect();
    fps.dedup();
    use sha2::Digest;
    let fp = hex::encode(sha2::Sha256::digest(fps.join(",").as_bytes()));
    Ok(RunReport::new("compare", None, fp, 0, CommandResult::Compare(rec)))
}

pub fn gradcheck(cfg: &RunConfig, seed: u64) -> anyhow::Result<RunReport> {
    let g = &cfg.gradcheck;
    let rows = loss_suite(seed, g.probes, g.eps, g.tolerance)?;
    let passed = rows.iter().all(|r| r.passed);
    Ok(RunReport::new(
        "gradcheck",
        Some(cfg),
        cfg.fingerprint(),
        seed,
        CommandResult::Gradcheck(GradcheckRecord { rows, passed }),
    ))
}

pub fn pack(cfg: &RunConfig, seed: u64) -> anyhow::Result<RunReport> {
    let p = &cfg.pack;
    let path = p.corpus.as_ref().ok_or_else(|| config_error("pack needs a corpus (pack.corpus or --corpus)"))?;
    let vocab = TokenVocabulary::try_from(p.vocab.clone())?;
    let file = std::fs::File::open(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let samples = corpus::read(std::io::BufReader::new(file), &vocab, p.block_size)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let lengths: Vec<(u64, usize)> =
        samples.iter().map(|s| (s.id, aligned_length(s.tokens.len(), p.block_size))).collect();
    let packed = ffd(&lengths, p.capacity).map_err(|e| config_error(e.to_string()))?;
    let aligned: Vec<usize> = lengths.iter().map(|l| l.1).collect();
    let tokens: usize = samples.iter().map(|s| s.tokens.len()).sum();
    if let Some(out) = &p.shards {
        let by_id: HashMap<u64, &TokenSequence> = samples.iter().map(|s| (s.id, &s.tokens)).collect();
        if by_id.len() != samples.len() {
            return Err(config_error("duplicate sample ids in the corpus"));
        }
        let shards = packed
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                Ok(Sample { id: i as u64, tokens: materialize(seq, &by_id, &vocab, vocab.eos_id())?, prompt_len: 0 })
            })
            .collect::<sprint_core::Result<Vec<_>>>()?;
        let f = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
        corpus::write(std::io::BufWriter::new(f), &shards)?;
    }
    let rec = PackRecord {
        samples: samples.len(),
        sequences: packed.len(),
        capacity: p.capacity,
        tokens,
        padding: total_padding(&packed),
        naive_padding: naive_padding(&aligned, p.capacity),
        batch_max_padding: batch_max_padding(&aligned, p.batch_size),
        utilization: tokens as f64 / (packed.len() * p.capacity).max(1) as f64,
        layout: packed.iter().map(|s| s.segments.iter().map(|g| (g.sample_id, g.offset, g.length)).collect()).collect(),
    };
    Ok(RunReport::new("pack", Some(cfg), cfg.fingerprint(), seed, CommandResult::Pack(rec)))
}

pub fn moesim(cfg: &RunConfig, seed: u64) -> anyhow::Result<RunReport> {
    let m = &cfg.moesim;
    let traj = simulate_fixed_stream(&m.gate_logits, m.tokens_per_batch, m.updates, &m.moe_config())?;
    let last = traj.last().expect("trajectory includes the initial batch");
    let rec = MoeSimRecord {
        initial_gap: traj[0].gap,
        final_gap: last.gap,
        final_load: last.load.clone(),
        final_bias: last.bias.clone(),
        gaps: traj.iter().map(|s| s.gap).collect(),
    };
    Ok(RunReport::new("moesim", Some(cfg), cfg.fingerprint(), seed, CommandResult::Moesim(rec)))
}

pub fn flow(cfg: &RunConfig, seed: u64) -> anyhow::Result<RunReport> {
    let f = &cfg.flow;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let started = Instant::now();
    let (teacher, student) = distill_pipeline(&f.task, &f.train, seed, &mut rng)?;
    let train_ns = started.elapsed().as_nanos() as u64;
    if let Some(dir) = &f.save_dir {
        std::fs::create_dir_all(dir)?;
        teacher.save(&dir.join("teacher.bin"))?;
        student.without_aux().save(&dir.join("student_deploy.bin"))?;
        student.save(&dir.join("student.bin"))?;
    }
    let report = evaluate(&teacher, &student, f.samples, f.resamplings, &mut rng)?;
    Ok(RunReport::new("flow", Some(cfg), cfg.fingerprint(), seed, CommandResult::Flow(FlowRecord { report, train_ns })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub line: usize,
    pub command: String,
    pub status: ReplayStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStatus {
    Identical,
    Diverged,
    /// `compare` reports derive from other reports and are not re-run.
    Skipped,
}

/// Re-executes one report from its embedded config and seed.
pub fn replay_one(report: &RunReport) -> anyhow::Result<ReplayStatus> {
    let Some(cfg) = &report.config else { return Ok(ReplayStatus::Skipped) };
    cfg.validate()?;
    if cfg.fingerprint() != report.fingerprint {
        return Err(config_error(format!(
            "fingerprint mismatch: report {} vs config {}",
            report.fingerprint,
            cfg.fingerprint()
        )));
    }
    let seed = report.seed;
    let fresh = match &report.result {
        CommandResult::Generate(g) => {
            let variant = cfg
                .generate
                .variants
                .iter()
                .find(|v| v.label == g.label)
                .ok_or_else(|| config_error(format!("variant {} not in the embedded config", g.label)))?;
            CommandResult::Generate(generate_one(cfg, seed, g.run, variant)?)
        }
        CommandResult::Compare(_) => return Ok(ReplayStatus::Skipped),
        CommandResult::Gradcheck(_) => gradcheck(cfg, seed)?.result,
        CommandResult::Pack(_) => pack(cfg, seed)?.result,
        CommandResult::Moesim(_) => moesim(cfg, seed)?.result,
        CommandResult::Flow(_) => flow(cfg, seed)?.result,
    };
    Ok(if fresh.deterministic() == report.result.deterministic() {
        ReplayStatus::Identical
    } else {
        ReplayStatus::Diverged
    })
}

pub fn replay(reports: &[RunReport], jobs: usize) -> anyhow::Result<Vec<ReplayOutcome>> {
    pool(jobs)?.install(|| {
        reports
            .par_iter()
            .enumerate()
            .map(|(i, r)| Ok(ReplayOutcome { line: i + 1, command: r.command.clone(), status: replay_one(r)? }))
            .collect()
    })
}

/// Appends `reports` to `out` when given.
pub fn persist(out: Option<&Path>, reports: &[RunReport]) -> anyhow::Result<()> {
    if let Some(path) = out {
        crate::report::append(path, reports)?;
    }
    Ok(())
}

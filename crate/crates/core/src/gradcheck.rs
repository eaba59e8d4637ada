//! Central finite-difference gradient probes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error. Below it a gradient entry is
/// compared in absolute terms, since roundoff in the difference quotient is
/// about `1e-16 · |loss| / eps`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(+eps) − f(−eps)) / 2eps`.
pub fn central_difference(f: impl Fn(f64) -> f64, eps: f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

/// `count` distinct indices in `[0, n)`, sorted.
pub fn probe_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Probes `indices`: `perturbed(i, delta)` evaluates the loss with scalar `i`
/// shifted by `delta`; `analytic(i)` reads the computed gradient.
pub fn check(
    indices: &[usize],
    eps: f64,
    analytic: impl Fn(usize) -> f64,
    perturbed: impl Fn(usize, f64) -> f64,
) -> Vec<Probe> {
    indices
        .iter()
        .map(|&i| {
            let a = analytic(i);
            let n = central_difference(|d| perturbed(i, d), eps);
            Probe { index: i, analytic: a, numeric: n, rel_error: relative_error(a, n) }
        })
        .collect()
}

pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}

/// One row of the loss gradient suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub loss: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub probes: Vec<Probe>,
}

fn row(loss: &str, params: usize, probes: Vec<Probe>, tolerance: f64) -> SuiteRow {
    let max_rel_error = max_rel_error(&probes);
    SuiteRow { loss: loss.into(), params, max_rel_error, passed: max_rel_error < tolerance, probes }
}

/// Finite-difference checks of every training loss on small (< 1k
/// parameter) models: BDLM on dense and MoE models, SFT, flow matching and
/// distillation (with the frozen copy held fixed).
pub fn loss_suite(seed: u64, count: usize, eps: f64, tolerance: f64) -> crate::Result<Vec<SuiteRow>> {
    use crate::flow::{self, FlowConfig, FlowNet, FlowParams, FlowPath};
    use crate::model::{Model, ModelConfig};
    use crate::moe::MoEConfig;
    use crate::objectives::{bdlm_loss, corrupt, loss_value, sft_loss, NoiseSchedule};
    use crate::vocab::{TokenSequence, TokenVocabulary};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = NoiseSchedule::linear();
    let tiny = |moe: bool| ModelConfig {
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 6,
        vocab: TokenVocabulary::build(6, 0, &[]).expect("static vocabulary"),
        block_size: 2,
        rope_base: 10000.0,
        moe: moe.then(|| MoEConfig::new(3, 2, 3)),
    };
    let mut rows = Vec::new();
    for (name, moe, sft) in [("bdlm_dense", false, false), ("bdlm_moe", true, false), ("sft_moe", true, true)] {
        let cfg = tiny(moe);
        let model = Model::init_scaled(cfg.clone(), seed, 0.5)?;
        let mut batches = Vec::new();
        for (ids, prompt) in [(vec![1, 4, 2, 0, 5, 3], 0usize), (vec![5, 4, 3, 2, 1, 0, 1], 3)] {
            let prompt = if sft { prompt.max(1) } else { prompt };
            let len = prompt + (ids.len() - prompt) / cfg.block_size * cfg.block_size;
            let x0 = TokenSequence::from_ids(&cfg.vocab, ids[..len].to_vec(), cfg.block_size)?;
            let t = 0.3 + 0.6 * rng.random::<f64>();
            batches.push(corrupt(&x0, prompt, t, &schedule, cfg.vocab.mask_id(), &mut rng)?);
        }
        let out = if sft { sft_loss(&model, &batches, &schedule)? } else { bdlm_loss(&model, &batches, &schedule)? };
        let n = model.num_params();
        let probes = check(
            &probe_indices(n, count, seed),
            eps,
            |i| out.grads.flat_get(i),
            |i, d| {
                let mut p = model.params.clone();
                p.flat_set(i, p.flat_get(i) + d);
                loss_value(&model.with_params(p), &batches, &schedule, sft).expect("loss on a valid batch")
            },
        );
        rows.push(row(name, n, probes, tolerance));
    }

    let fcfg = FlowConfig { dim: 2, hidden: 8, cond_vocab: 3, cond_dim: 3 };
    let paths: Vec<FlowPath> = (0..6)
        .map(|_| {
            let x0 = vec![rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let x1 = vec![rng.random::<f64>() * 2.0, rng.random::<f64>() - 1.0];
            FlowPath::new(x0, x1, 0.05 + 0.9 * rng.random::<f64>())
        })
        .collect();
    let conds: Vec<Vec<usize>> = (0..6).map(|i| if i % 2 == 0 { vec![i % 3] } else { vec![0, 2] }).collect();
    for (name, aux) in [("fm", false), ("distill", true)] {
        let net = FlowNet::new(fcfg.clone(), FlowParams::init(&fcfg, seed, aux))?;
        let frozen = net.clone();
        let loss = |n: &FlowNet| {
            if aux {
                flow::distill_loss(n, &frozen, &paths, &conds, flow::DEFAULT_JVP_EPS)
            } else {
                flow::fm_loss(n, &paths, &conds)
            }
        };
        let grads = loss(&net)?.grads;
        let n = net.params.num_params();
        let probes = check(
            &probe_indices(n, count, seed),
            eps,
            |i| grads.flat_get(i),
            |i, d| {
                let mut p = net.params.clone();
                let v = p.flat_get(i);
                p.flat_set(i, v + d);
                loss(&FlowNet { config: fcfg.clone(), params: p }).expect("loss on a valid batch").loss
            },
        );
        rows.push(row(name, n, probes, tolerance));
    }
    Ok(rows)
}

//! Block-wise generation.
//!
//! Each block starts as `L_B` MASK tokens. The first denoising step of a
//! block is a full forward pass over everything generated so far; later
//! steps differ by path:
//!
//! * `Baseline` repeats the full forward pass at every step.
//! * `Sprint` keeps the first pass's prefix KV cache, prunes it once per
//!   block and forwards only the current block against it.
//!
//! With full retention both paths see bit-identical block logits.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMask, BlockLayout, Model, PrefixCache};
use crate::sprint::{prune_prefix, score_prefix, select_unmask, PruneConfig, UnmaskPolicy};
use crate::tensor::{softmax, Matrix};
use crate::vocab::{TokenId, TokenSequence, TokenVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DecodePath {
    Baseline,
    #[default]
    Sprint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub n_blocks: usize,
    pub policy: UnmaskPolicy,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub path: DecodePath,
    /// Sample committed ids at this temperature instead of taking the argmax.
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl DecodeConfig {
    pub fn baseline(n_blocks: usize, policy: UnmaskPolicy) -> Self {
        Self { n_blocks, policy, prune: PruneConfig::full(), path: DecodePath::Baseline, temperature: None }
    }

    pub fn sprint(n_blocks: usize, policy: UnmaskPolicy, prune: PruneConfig) -> Self {
        Self { n_blocks, policy, prune, path: DecodePath::Sprint, temperature: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        self.policy.validate()?;
        self.prune.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseState {
    pub block_index: usize,
    pub step: usize,
    /// Still-masked positions of the current block, ascending.
    pub masked: Vec<usize>,
    /// Confidences of the last step's predictions, aligned with the masked
    /// set before that step's commits.
    pub confidences: Vec<f64>,
    /// Every id so far; MASK at still-masked positions.
    pub committed: Vec<TokenId>,
    pub nfe: u64,
    pub attended: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: TokenSequence,
    pub nfe: u64,
    pub attended: u64,
    pub wall_ns: u64,
    pub per_block_steps: Vec<usize>,
    /// Accepted count per step, per block.
    pub acceptances: Vec<Vec<usize>>,
}

impl GenerationResult {
    /// Generated ids after the prompt.
    pub fn generated(&self, prompt_len: usize) -> &[TokenId] {
        &self.tokens.ids()[prompt_len..]
    }
}

/// Argmax over committable ids with its full-vocabulary softmax probability.
/// Ties go to the lower id.
pub fn greedy_commit(logits: &Matrix, vocab: &TokenVocabulary) -> (Vec<TokenId>, Vec<f64>) {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best: Option<usize> = None;
            for (i, &x) in row.iter().enumerate() {
                if vocab.is_uncommittable(i as TokenId) {
                    continue;
                }
                if best.is_none_or(|b| x > row[b]) {
                    best = Some(i);
                }
            }
            let id = best.expect("vocabulary has committable ids");
            (id as TokenId, softmax(row)[id])
        })
        .unzip()
}

/// Draws from the committable ids at `temperature`; the confidence is still
/// the temperature-1 probability of the drawn id.
pub fn sample_commit<R: Rng + ?Sized>(
    logits: &Matrix,
    vocab: &TokenVocabulary,
    temperature: f64,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<f64>) {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let scaled: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(i, &x)| if vocab.is_uncommittable(i as TokenId) { f64::NEG_INFINITY } else { x / temperature })
                .collect();
            let p = softmax(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut id = p.iter().rposition(|&q| q > 0.0).unwrap_or(0);
            for (i, &q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    id = i;
                    break;
                }
            }
            (id as TokenId, softmax(row)[id])
        })
        .unzip()
}

struct Session<'m> {
    model: &'m Model,
    cfg: &'m DecodeConfig,
    layout: BlockLayout,
    mask: AttentionMask,
    state: DenoiseState,
}

impl Session<'_> {
    fn full_pass(&mut self, end: usize) -> Result<crate::model::ForwardOutput> {
        let positions: Vec<usize> = (0..end).collect();
        let out = self.model.forward(&self.state.committed[..end], &positions, None, &self.mask)?;
        self.state.nfe += 1;
        self.state.attended += out.attended;
        Ok(out)
    }

    fn block_pass(&mut self, range: std::ops::Range<usize>, cache: &PrefixCache) -> Result<Matrix> {
        let positions: Vec<usize> = range.clone().collect();
        let out = self.model.forward(&self.state.committed[range], &positions, Some(cache), &self.mask)?;
        self.state.nfe += 1;
        self.state.attended += out.attended;
        Ok(out.logits)
    }

    /// Builds the pruned prefix cache from the block's first full pass.
    fn prefix_cache(
        &self,
        out: &crate::model::ForwardOutput,
        start: usize,
        prompt: &TokenSequence,
    ) -> Result<PrefixCache> {
        let cfg = &self.model.config;
        let full = out.extend_cache(None, cfg.n_layers, cfg.d_model)?.truncated(start);
        if self.cfg.prune.is_full() || start == 0 {
            return Ok(full);
        }
        let mut modalities = prompt.modalities();
        for &id in &self.state.committed[prompt.len()..start] {
            modalities.push(cfg.vocab.modality_of(id).expect("committed ids are in range"));
        }
        let rows: Vec<usize> = (0..start).collect();
        let prefix_logits = out.logits.select_rows(&rows);
        let records = score_prefix(&full, &prefix_logits, &modalities, prompt.len(), &self.cfg.prune)?;
        prune_prefix(&records, &full, &self.cfg.prune)
    }
}

/// Generates `cfg.n_blocks` blocks of `model.config.block_size` tokens after
/// `prompt`. `rng` is consumed only when sampling.
pub fn generate<R: Rng + ?Sized>(
    model: &Model,
    prompt: &TokenSequence,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Sequence("prompt must be non-empty".into()));
    }
    let started = Instant::now();
    let vocab = &model.config.vocab;
    let block = model.config.block_size;
    let steps = cfg.policy.total_steps;
    let layout = BlockLayout::new(block, prompt.len());
    let total = prompt.len() + cfg.n_blocks * block;
    let mut session = Session {
        model,
        cfg,
        layout,
        mask: AttentionMask::block(layout, total),
        state: DenoiseState {
            block_index: 0,
            step: 0,
            masked: Vec::new(),
            confidences: Vec::new(),
            committed: prompt.ids().to_vec(),
            nfe: 0,
            attended: 0,
        },
    };
    let mut per_block_steps = Vec::with_capacity(cfg.n_blocks);
    let mut acceptances = Vec::with_capacity(cfg.n_blocks);

    for k in 0..cfg.n_blocks {
        let range = session.layout.generated_block(k);
        session.state.committed.extend(std::iter::repeat_n(vocab.mask_id(), block));
        session.state.block_index = k;
        session.state.masked = range.clone().collect();
        let mut cache: Option<PrefixCache> = None;
        let mut accepted_per_step = Vec::new();
        let mut t = 0;
        while !session.state.masked.is_empty() {
            session.state.step = t;
            let wrap = |e: Error| Error::Decode { block: k, step: t, source: Box::new(e) };
            let block_logits = if t == 0 || cfg.path == DecodePath::Baseline {
                let out = session.full_pass(range.end).map_err(wrap)?;
                if cfg.path == DecodePath::Sprint {
                    cache = Some(session.prefix_cache(&out, range.start, prompt).map_err(wrap)?);
                }
                let rows: Vec<usize> = range.clone().collect();
                out.logits.select_rows(&rows)
            } else {
                let c = cache.take().expect("prefix cache built at step 0");
                let logits = session.block_pass(range.clone(), &c).map_err(wrap)?;
                cache = Some(c);
                logits
            };
            let masked_rows: Vec<usize> = session.state.masked.iter().map(|&p| p - range.start).collect();
            let logits = block_logits.select_rows(&masked_rows);
            let (pred, conf) = match cfg.temperature {
                Some(temp) => sample_commit(&logits, vocab, temp, rng),
                None => greedy_commit(&logits, vocab),
            };
            let accept = select_unmask(&conf, &cfg.policy, steps.saturating_sub(t).max(1));
            for &i in &accept {
                session.state.committed[session.state.masked[i]] = pred[i];
            }
            let keep: Vec<usize> = (0..session.state.masked.len())
                .filter(|i| accept.binary_search(i).is_err())
                .map(|i| session.state.masked[i])
                .collect();
            session.state.masked = keep;
            session.state.confidences = conf;
            accepted_per_step.push(accept.len());
            t += 1;
        }
        per_block_steps.push(t);
        acceptances.push(accepted_per_step);
    }

    let mut tokens = prompt.clone();
    tokens.extend_from_ids(vocab, &session.state.committed[prompt.len()..])?;
    Ok(GenerationResult {
        tokens,
        nfe: session.state.nfe,
        attended: session.state.attended,
        wall_ns: started.elapsed().as_nanos() as u64,
        per_block_steps,
        acceptances,
    })
}

/// Width of [`periodic_copy_model`].
const COPY_WIDTH: usize = 32;
/// Query/key magnitude; sets how sharply attention locks onto one key.
const COPY_SHARPNESS: f64 = 3.0;
/// Head gain; sets the logit margin of the copied token.
const COPY_GAIN: f64 = 8.0;

/// A one-layer, one-head model that predicts, at every position, the token
/// exactly one block earlier, with confidence near 1.
///
/// Every id embeds as `[1, code]` with a unit-norm code, so all inputs share
/// one RMS scale. Query and key read only the constant coordinate; the query
/// is the key rotated by `−L_B` positions per rotary frequency, so the
/// score peaks at relative offset `−L_B`. Values and head read the code
/// dimensions, and MASK's code lives in a dimension both ignore. Prompts
/// should be at least one block long.
pub fn periodic_copy_model(vocab: TokenVocabulary, block_size: usize, seed: u64) -> Result<Model> {
    use rand::SeedableRng;
    let d = COPY_WIDTH;
    let config = crate::model::ModelConfig {
        d_model: d,
        n_heads: 1,
        n_layers: 1,
        d_ff: 1,
        vocab,
        block_size,
        rope_base: 10000.0,
        moe: None,
    };
    let mut params = crate::model::ModelParams::init(&config, 0, 0.0);
    let v = config.vocab_size();
    let mask = config.vocab.mask_id() as usize;
    let code_dims = 1..d - 1;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for id in 0..v {
        params.embed.set(id, 0, 1.0);
        if id == mask {
            params.embed.set(id, d - 1, 1.0);
            continue;
        }
        let code: Vec<f64> = code_dims.clone().map(|_| rng.random::<f64>() - 0.5).collect();
        let norm = code.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, c) in code_dims.clone().zip(&code) {
            params.embed.set(id, j, c / norm);
            params.head.set(j, id, COPY_GAIN * c / norm);
        }
    }
    let layer = &mut params.layers[0];
    for i in 0..d / 2 {
        let theta = config.rope_base.powf(-((2 * i) as f64) / d as f64);
        let (sin, cos) = (-(block_size as f64) * theta).sin_cos();
        layer.wk.set(0, 2 * i, COPY_SHARPNESS);
        layer.wq.set(0, 2 * i, COPY_SHARPNESS * cos);
        layer.wq.set(0, 2 * i + 1, COPY_SHARPNESS * sin);
    }
    for j in code_dims {
        layer.wv.set(j, j, 1.0);
        layer.wo.set(j, j, 1.0);
    }
    Model::new(config, params)
}

/// Fraction of positions where two generations agree.
pub fn token_agreement(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let n = a.len().max(b.len());
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            vocab: TokenVocabulary::build(12, 4, &[256]).unwrap(),
            block_size: 4,
            rope_base: 10000.0,
            moe: None,
        }
    }

    fn prompt(cfg: &ModelConfig) -> TokenSequence {
        TokenSequence::from_ids(&cfg.vocab, vec![cfg.vocab.bos_id(), 3, 7, 1, 9], cfg.block_size).unwrap()
    }

    #[test]
    fn greedy_commit_examples() {
        let vocab = TokenVocabulary::build(10, 0, &[256]).unwrap();
        let v = vocab.total_size();
        let mut one_hot = vec![0.0; v];
        one_hot[7] = 100.0;
        let (ids, conf) = greedy_commit(&Matrix::from_vec(1, v, one_hot), &vocab);
        assert_eq!(ids, vec![7]);
        assert!((conf[0] - 1.0).abs() < 1e-12);

        let (ids, conf) = greedy_commit(&Matrix::zeros(1, v), &vocab);
        assert_eq!(ids, vec![0]);
        assert!((conf[0] - 1.0 / v as f64).abs() < 1e-15);

        let mut row = vec![0.0; v];
        row[vocab.mask_id() as usize] = 9.0;
        row[vocab.size_token(256).unwrap() as usize] = 8.0;
        row[4] = 5.0;
        row[2] = 4.0;
        let (ids, _) = greedy_commit(&Matrix::from_vec(1, v, row), &vocab);
        assert_eq!(ids, vec![4]);
    }

    #[test]
    fn fixed_schedule_uses_b_times_t_passes() {
        let cfg = config();
        let model = Model::init(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for path in [DecodePath::Baseline, DecodePath::Sprint] {
            let dc = DecodeConfig { path, ..DecodeConfig::baseline(3, UnmaskPolicy::fixed(4)) };
            let r = generate(&model, &prompt(&cfg), &dc, &mut rng).unwrap();
            assert_eq!(r.nfe, 12);
            assert_eq!(r.acceptances, vec![vec![1, 1, 1, 1]; 3]);
            assert!(!r.tokens.ids().contains(&cfg.vocab.mask_id()));
            assert_eq!(r.tokens.len(), 5 + 12);
        }
    }

    #[test]
    fn zero_threshold_finishes_each_block_in_one_pass() {
        let cfg = config();
        let model = Model::init(cfg.clone(), 3).unwrap();
        let dc = DecodeConfig::sprint(3, UnmaskPolicy::adaptive(0.0, 4), PruneConfig::full());
        let r = generate(&model, &prompt(&cfg), &dc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.nfe, 3);
        assert_eq!(r.per_block_steps, vec![1, 1, 1]);
    }

    #[test]
    fn full_retention_matches_baseline() {
        let cfg = config();
        for seed in 0..5 {
            let model = Model::init_scaled(cfg.clone(), seed, 0.3).unwrap();
            let policy = UnmaskPolicy::adaptive(1.5, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let base = generate(&model, &prompt(&cfg), &DecodeConfig::baseline(3, policy), &mut rng).unwrap();
            let fast = generate(&model, &prompt(&cfg), &DecodeConfig::sprint(3, policy, PruneConfig::full()), &mut rng)
                .unwrap();
            assert_eq!(base.tokens, fast.tokens);
            assert_eq!(base.acceptances, fast.acceptances);
            assert_eq!(base.nfe, fast.nfe);
            assert!(fast.attended < base.attended);
        }
    }

    #[test]
    fn pruning_never_increases_attention() {
        let cfg = config();
        let model = Model::init_scaled(cfg.clone(), 4, 0.3).unwrap();
        let policy = UnmaskPolicy::fixed(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full =
            generate(&model, &prompt(&cfg), &DecodeConfig::sprint(3, policy, PruneConfig::full()), &mut rng).unwrap();
        let cut = PruneConfig { r_text: 0.5, r_img: 0.5, r_global: 0.5, alpha: 0.5 };
        let pruned = generate(&model, &prompt(&cfg), &DecodeConfig::sprint(3, policy, cut), &mut rng).unwrap();
        assert!(pruned.attended < full.attended);
        assert_eq!(pruned.nfe, full.nfe);
    }

    #[test]
    fn committed_tokens_are_never_altered() {
        let cfg = config();
        let model = Model::init_scaled(cfg.clone(), 5, 0.3).unwrap();
        let dc = DecodeConfig {
            temperature: Some(1.0),
            ..DecodeConfig::sprint(2, UnmaskPolicy::adaptive(0.5, 4), PruneConfig::default())
        };
        let a = generate(&model, &prompt(&cfg), &dc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate(&model, &prompt(&cfg), &dc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(&a.tokens.ids()[..5], prompt(&cfg).ids());
        assert!(a.generated(5).iter().all(|&id| !cfg.vocab.is_uncommittable(id)));
    }

    #[test]
    fn copy_model_repeats_the_last_prompt_block() {
        let vocab = TokenVocabulary::build(40, 8, &[256]).unwrap();
        let model = periodic_copy_model(vocab.clone(), 4, 1).unwrap();
        let ids = vec![vocab.bos_id(), 3, 17, 25, 9, 31];
        let p = TokenSequence::from_ids(&vocab, ids.clone(), 4).unwrap();
        let policy = UnmaskPolicy::adaptive(0.95, 4);
        let r = generate(
            &model,
            &p,
            &DecodeConfig::sprint(3, policy, PruneConfig::full()),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let expect: Vec<TokenId> = (0..12).map(|i| ids[2 + i % 4]).collect();
        assert_eq!(r.generated(6), &expect[..]);
        assert_eq!(r.nfe, 3);
    }

    #[test]
    fn rejects_bad_requests() {
        let cfg = config();
        let model = Model::init(cfg.clone(), 0).unwrap();
        let empty = TokenSequence::from_ids(&cfg.vocab, vec![], 4).unwrap();
        let dc = DecodeConfig::baseline(1, UnmaskPolicy::fixed(4));
        assert!(generate(&model, &empty, &dc, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let dc = DecodeConfig::baseline(0, UnmaskPolicy::fixed(4));
        assert!(generate(&model, &prompt(&cfg), &dc, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

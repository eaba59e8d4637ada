//! Noise schedule, block-diffusion pre-training loss, the prompt-conditioned
//! SFT loss with inverse-sqrt mask-count reweighting, and complementary
//! masking.
//!
//! For block `k` of a sample the model sees the clean blocks `< k` (and the
//! prompt) followed by the noised block `k`; the block mask keeps the clean
//! context from seeing the noised block. Each block with at least one
//! masked position costs one forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionMask, BlockLayout, Model, ModelParams};
use crate::tensor::{log_sum_exp, Matrix};
use crate::vocab::{TokenId, TokenSequence};

/// Lower bound of the sampled timestep; bounds the `1/t` weight.
pub const T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        Self { kind: ScheduleKind::Linear }
    }

    /// Survival probability of a clean token at time `t`.
    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
        }
    }

    pub fn alpha_prime(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -1.0,
        }
    }

    /// `−α'(t) / (1 − α(t))`.
    pub fn time_weight(&self, t: f64) -> f64 {
        -self.alpha_prime(t) / (1.0 - self.alpha(t))
    }

    pub fn mask_probability(&self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Uniform on `(T_MIN, 1]`.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        1.0 - rng.random::<f64>() * (1.0 - T_MIN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub clean: TokenSequence,
    pub corrupted: TokenSequence,
    pub t: f64,
    pub mask_flags: Vec<bool>,
    pub prompt_len: usize,
}

impl MaskedBatch {
    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().filter(|&&m| m).count()
    }

    /// A batch with an explicit mask; prompt positions must stay clean.
    pub fn with_mask(
        x0: &TokenSequence,
        prompt_len: usize,
        t: f64,
        flags: Vec<bool>,
        mask_id: TokenId,
    ) -> Result<Self> {
        check_corruptible(x0, prompt_len, t)?;
        if flags.len() != x0.len() {
            return Err(Error::Shape(format!("{} mask flags for {} tokens", flags.len(), x0.len())));
        }
        if flags[..prompt_len].iter().any(|&m| m) {
            return Err(Error::Sequence("prompt positions cannot be masked".into()));
        }
        Ok(Self::from_flags(x0, prompt_len, t, flags, mask_id))
    }

    fn from_flags(x0: &TokenSequence, prompt_len: usize, t: f64, flags: Vec<bool>, mask_id: TokenId) -> Self {
        let mut corrupted = x0.clone();
        let ids: Vec<TokenId> = x0.ids().iter().zip(&flags).map(|(&id, &m)| if m { mask_id } else { id }).collect();
        corrupted.replace_ids(ids);
        Self { clean: x0.clone(), corrupted, t, mask_flags: flags, prompt_len }
    }
}

fn check_corruptible(x0: &TokenSequence, prompt_len: usize, t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Sequence(format!("timestep {t} outside (0, 1]")));
    }
    if prompt_len >= x0.len() {
        return Err(Error::Sequence(format!("prompt_len {prompt_len} leaves nothing to mask in {} tokens", x0.len())));
    }
    Ok(())
}

fn bernoulli_flags<R: Rng + ?Sized>(len: usize, prompt_len: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|i| i >= prompt_len && rng.random::<f64>() < p).collect()
}

/// Masks each non-prompt token independently with probability `1 − α(t)`,
/// resampling positions (same `t`) until at least one is masked.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &TokenSequence,
    prompt_len: usize,
    t: f64,
    schedule: &NoiseSchedule,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<MaskedBatch> {
    check_corruptible(x0, prompt_len, t)?;
    let p = schedule.mask_probability(t);
    loop {
        let flags = bernoulli_flags(x0.len(), prompt_len, p, rng);
        if flags.iter().any(|&m| m) {
            return Ok(MaskedBatch::from_flags(x0, prompt_len, t, flags, mask_id));
        }
    }
}

/// A masked sample and its exact complement over the non-prompt positions.
/// Either member may be fully clean.
pub fn complementary_pair<R: Rng + ?Sized>(
    x0: &TokenSequence,
    prompt_len: usize,
    t: f64,
    schedule: &NoiseSchedule,
    mask_id: TokenId,
    rng: &mut R,
) -> Result<(MaskedBatch, MaskedBatch)> {
    check_corruptible(x0, prompt_len, t)?;
    let flags = bernoulli_flags(x0.len(), prompt_len, schedule.mask_probability(t), rng);
    let complement: Vec<bool> = flags.iter().enumerate().map(|(i, &m)| i >= prompt_len && !m).collect();
    Ok((
        MaskedBatch::from_flags(x0, prompt_len, t, flags, mask_id),
        MaskedBatch::from_flags(x0, prompt_len, t, complement, mask_id),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLoss {
    /// `w(t) · Σ masked NLL` for this sample.
    pub loss: f64,
    pub masked: usize,
    /// Weight in the batch reduction (`1/B` or the normalized `β_j`).
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelParams,
    pub per_sample: Vec<SampleLoss>,
}

/// Builds `w(t) · Σ_k Σ_i 1[masked] · NLL` for one sample on the tape.
/// Returns `None` when nothing is masked.
fn sample_loss<'a>(
    model: &'a Model,
    tape: &mut Tape<'a>,
    vars: &crate::model::ModelWeights<Var>,
    batch: &MaskedBatch,
    schedule: &NoiseSchedule,
) -> Result<Option<Var>> {
    let block = model.config.block_size;
    let len = batch.clean.len();
    if batch.corrupted.len() != len || batch.mask_flags.len() != len {
        return Err(Error::Shape("clean, corrupted and flags lengths differ".into()));
    }
    if batch.prompt_len > len || !(len - batch.prompt_len).is_multiple_of(block) {
        return Err(Error::Sequence(format!(
            "{} target tokens after a {}-token prompt do not form full blocks of {block}",
            len.saturating_sub(batch.prompt_len),
            batch.prompt_len
        )));
    }
    if batch.mask_flags[..batch.prompt_len].iter().any(|&m| m) {
        return Err(Error::Sequence("prompt positions may not be masked".into()));
    }
    let layout = BlockLayout::new(block, batch.prompt_len);
    let weight = schedule.time_weight(batch.t);
    let n_blocks = (len - batch.prompt_len) / block;
    let mut total: Option<Var> = None;
    for k in 0..n_blocks {
        let range = layout.generated_block(k);
        let targets: Vec<(usize, usize, f64)> = range
            .clone()
            .filter(|&p| batch.mask_flags[p])
            .map(|p| (p, batch.clean.ids()[p] as usize, weight))
            .collect();
        if targets.is_empty() {
            continue;
        }
        let mut ids = batch.clean.ids()[..range.start].to_vec();
        ids.extend_from_slice(&batch.corrupted.ids()[range.clone()]);
        let positions: Vec<usize> = (0..range.end).collect();
        let mask = AttentionMask::block(layout, range.end);
        let g = model.build_graph(tape, vars, &ids, &positions, None, &mask)?;
        let ce = tape.cross_entropy(g.logits, &targets);
        total = Some(match total {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    Ok(total)
}

/// Weighted sum of per-sample losses plus gradients for every parameter.
fn reduce(model: &Model, batches: &[MaskedBatch], schedule: &NoiseSchedule, weights: &[f64]) -> Result<LossOutput> {
    let mut tape = Tape::new();
    let vars = model.param_vars(&mut tape, true);
    let mut total: Option<Var> = None;
    let mut per_sample = Vec::with_capacity(batches.len());
    for (b, &w) in batches.iter().zip(weights) {
        let sample = sample_loss(model, &mut tape, &vars, b, schedule)?;
        let value = sample.map_or(0.0, |v| tape.value(v).data()[0]);
        per_sample.push(SampleLoss { loss: value, masked: b.masked_count(), weight: w });
        if let Some(v) = sample {
            let scaled = tape.scale(v, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled),
                None => scaled,
            });
        }
    }
    let total = total.ok_or(Error::NoMaskedTokens)?;
    let loss = tape.value(total).data()[0];
    let mut grads = tape.backward(total);
    let zero = model.params.zeros_like();
    let mut zeros = zero.tensors().into_iter();
    let grads = vars.map(&mut |&v| {
        let z = zeros.next().unwrap();
        grads.take(v).unwrap_or_else(|| z.clone())
    });
    Ok(LossOutput { loss, grads, per_sample })
}

/// Mean over samples of `w(t) Σ_k Σ_i 1[masked] · (−log p(x0 | clean < k, noised k))`.
pub fn bdlm_loss(model: &Model, batches: &[MaskedBatch], schedule: &NoiseSchedule) -> Result<LossOutput> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let w = 1.0 / batches.len() as f64;
    reduce(model, batches, schedule, &vec![w; batches.len()])
}

/// `β_j = 1/sqrt(masked_j)`; zero for a fully clean sample.
pub fn mask_weight(masked: usize) -> f64 {
    if masked == 0 {
        0.0
    } else {
        1.0 / (masked as f64).sqrt()
    }
}

/// `Σ_j β_j L_j / Σ_j β_j` over prompt-conditioned samples.
pub fn sft_loss(model: &Model, batches: &[MaskedBatch], schedule: &NoiseSchedule) -> Result<LossOutput> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(b) = batches.iter().find(|b| b.prompt_len == 0) {
        return Err(Error::Sequence(format!("SFT sample of length {} has no prompt", b.clean.len())));
    }
    let betas: Vec<f64> = batches.iter().map(|b| mask_weight(b.masked_count())).collect();
    let norm: f64 = betas.iter().sum();
    if norm == 0.0 {
        return Err(Error::NoMaskedTokens);
    }
    let weights: Vec<f64> = betas.iter().map(|b| b / norm).collect();
    reduce(model, batches, schedule, &weights)
}

/// Loss value only, without building gradients into the output.
pub fn loss_value(model: &Model, batches: &[MaskedBatch], schedule: &NoiseSchedule, sft: bool) -> Result<f64> {
    let out = if sft { sft_loss(model, batches, schedule)? } else { bdlm_loss(model, batches, schedule)? };
    Ok(out.loss)
}

/// Anything that maps a (partially masked) sequence to per-position logits.
pub trait Denoiser {
    fn vocab_size(&self) -> usize;
    fn block_size(&self) -> usize;
    fn logits(&self, ids: &[TokenId], positions: &[usize], mask: &AttentionMask) -> Result<Matrix>;
}

impl Denoiser for Model {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    fn block_size(&self) -> usize {
        self.config.block_size
    }

    fn logits(&self, ids: &[TokenId], positions: &[usize], mask: &AttentionMask) -> Result<Matrix> {
        Ok(self.forward(ids, positions, None, mask)?.logits)
    }
}

/// Predicts the uniform distribution everywhere.
#[derive(Debug, Clone, Copy)]
pub struct UniformDenoiser {
    pub vocab_size: usize,
    pub block_size: usize,
}

impl Denoiser for UniformDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn block_size(&self) -> usize {
        self.block_size
    }

    fn logits(&self, ids: &[TokenId], _positions: &[usize], _mask: &AttentionMask) -> Result<Matrix> {
        Ok(Matrix::zeros(ids.len(), self.vocab_size))
    }
}

/// BDLM loss value for any denoiser, without gradients.
pub fn bdlm_loss_value<D: Denoiser + ?Sized>(
    denoiser: &D,
    batches: &[MaskedBatch],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let block = denoiser.block_size();
    let mut total = 0.0;
    let mut any = false;
    for b in batches {
        let len = b.clean.len();
        if b.prompt_len > len || (len - b.prompt_len) % block != 0 {
            return Err(Error::Sequence("targets do not form full blocks".into()));
        }
        let layout = BlockLayout::new(block, b.prompt_len);
        let w = schedule.time_weight(b.t);
        for k in 0..(len - b.prompt_len) / block {
            let range = layout.generated_block(k);
            if !range.clone().any(|p| b.mask_flags[p]) {
                continue;
            }
            any = true;
            let mut ids = b.clean.ids()[..range.start].to_vec();
            ids.extend_from_slice(&b.corrupted.ids()[range.clone()]);
            let positions: Vec<usize> = (0..range.end).collect();
            let logits = denoiser.logits(&ids, &positions, &AttentionMask::block(layout, range.end))?;
            for p in range.filter(|&p| b.mask_flags[p]) {
                let target = b.clean.ids()[p] as usize;
                if target >= denoiser.vocab_size() {
                    return Err(Error::Sequence(format!("target {target} outside the predictor's vocabulary")));
                }
                let row = logits.row(p);
                total += w * (log_sum_exp(row) - row[target]) / batches.len() as f64;
            }
        }
    }
    if !any {
        return Err(Error::NoMaskedTokens);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::model::ModelConfig;
    use crate::moe::MoEConfig;
    use crate::vocab::TokenVocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(moe: bool, text: usize) -> ModelConfig {
        ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            vocab: TokenVocabulary::build(text, 0, &[]).unwrap(),
            block_size: 2,
            rope_base: 10000.0,
            moe: moe.then(|| MoEConfig::new(3, 2, 3)),
        }
    }

    fn seq(cfg: &ModelConfig, ids: Vec<TokenId>) -> TokenSequence {
        TokenSequence::from_ids(&cfg.vocab, ids, cfg.block_size).unwrap()
    }

    #[test]
    fn schedule_weight_is_inverse_t() {
        let s = NoiseSchedule::linear();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.alpha(1.0), 0.0);
        for t in [1e-3, 0.25, 0.5, 1.0] {
            assert!((s.time_weight(t) - 1.0 / t).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let t = s.sample_t(&mut rng);
            assert!(t > T_MIN && t <= 1.0);
        }
    }

    #[test]
    fn uniform_predictor_loss() {
        // Zero parameters give a uniform distribution over all V ids, so two
        // masked tokens at t = 0.5 cost 2 · 2 · ln V.
        let cfg = tiny(false, 2);
        let v = cfg.vocab_size() as f64;
        let model = Model::init_scaled(cfg.clone(), 0, 0.0).unwrap();
        let x0 = seq(&cfg, vec![0, 1, 1, 0]);
        let flags = vec![false, true, true, false];
        let b = MaskedBatch::from_flags(&x0, 0, 0.5, flags, cfg.vocab.mask_id());
        let out = bdlm_loss(&model, &[b], &NoiseSchedule::linear()).unwrap();
        assert!((out.loss - 2.0 * 2.0 * v.ln()).abs() < 1e-9);
    }

    #[test]
    fn uniform_four_way_predictor() {
        let cfg = tiny(false, 2);
        let x0 = seq(&cfg, vec![0, 1, 1, 0]);
        let b = MaskedBatch::from_flags(&x0, 0, 0.5, vec![true, false, false, true], cfg.vocab.mask_id());
        let den = UniformDenoiser { vocab_size: 4, block_size: 2 };
        let loss = bdlm_loss_value(&den, &[b], &NoiseSchedule::linear()).unwrap();
        assert!((loss - 4.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn value_only_loss_matches_tape_loss() {
        let cfg = tiny(true, 6);
        let model = Model::init_scaled(cfg.clone(), 2, 0.5).unwrap();
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches: Vec<_> = [0.2, 0.7, 1.0]
            .iter()
            .map(|&t| corrupt(&seq(&cfg, vec![1, 2, 3, 4, 5, 0, 1]), 1, t, &s, cfg.vocab.mask_id(), &mut rng).unwrap())
            .collect();
        let a = bdlm_loss(&model, &batches, &s).unwrap().loss;
        let b = bdlm_loss_value(&model, &batches, &s).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn corrupt_endpoints_and_prompt() {
        let cfg = tiny(false, 8);
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = seq(&cfg, (0..8).map(|i| i as TokenId % 8).collect());
        let b = corrupt(&x0, 2, 1.0, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
        assert_eq!(b.masked_count(), 6);
        for _ in 0..1000 {
            let b = corrupt(&x0, 4, s.sample_t(&mut rng), &s, cfg.vocab.mask_id(), &mut rng).unwrap();
            assert!(b.mask_flags[..4].iter().all(|&m| !m));
            assert!(b.masked_count() >= 1);
            for (i, &m) in b.mask_flags.iter().enumerate() {
                assert_eq!(m, b.corrupted.ids()[i] == cfg.vocab.mask_id());
            }
        }
        // tiny t still yields a mask via resampling
        let b = corrupt(&x0, 0, 1e-3, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
        assert_eq!(b.t, 1e-3);
        assert!(b.masked_count() >= 1);
        assert!(corrupt(&x0, 8, 0.5, &s, cfg.vocab.mask_id(), &mut rng).is_err());
        assert!(corrupt(&x0, 0, 0.0, &s, cfg.vocab.mask_id(), &mut rng).is_err());
    }

    #[test]
    fn empirical_mask_rate() {
        let cfg = tiny(false, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = seq(&cfg, vec![3; 10_000]);
        let b = corrupt(&x0, 0, 0.5, &NoiseSchedule::linear(), cfg.vocab.mask_id(), &mut rng).unwrap();
        let rate = b.masked_count() as f64 / 10_000.0;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn complement_partitions_targets() {
        let cfg = tiny(false, 8);
        let s = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = seq(&cfg, vec![1; 9]);
        for _ in 0..1000 {
            let t = s.sample_t(&mut rng);
            let (a, b) = complementary_pair(&x0, 3, t, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
            for i in 0..9 {
                assert!(!(a.mask_flags[i] && b.mask_flags[i]));
                assert_eq!(a.mask_flags[i] || b.mask_flags[i], i >= 3);
            }
        }
        let (a, b) = complementary_pair(&x0, 3, 1.0, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
        assert_eq!((a.masked_count(), b.masked_count()), (6, 0));
    }

    #[test]
    fn perfect_predictor_has_near_zero_loss() {
        let mut cfg = tiny(false, 2);
        cfg.n_layers = 1;
        let mut model = Model::init_scaled(cfg.clone(), 0, 0.0).unwrap();
        // every position predicts token 1 with a huge margin
        for r in 0..cfg.vocab_size() {
            model.params.embed.set(r, 0, 1.0);
        }
        model.params.head.set(0, 1, 200.0);
        let x0 = seq(&cfg, vec![1, 1, 1, 1]);
        let b = MaskedBatch::from_flags(&x0, 0, 0.5, vec![true, false, true, true], cfg.vocab.mask_id());
        let out = bdlm_loss(&model, &[b], &NoiseSchedule::linear()).unwrap();
        assert!(out.loss < 1e-12, "loss {}", out.loss);
    }

    fn check_model_grads(model: &Model, batches: &[MaskedBatch], sft: bool) -> f64 {
        let s = NoiseSchedule::linear();
        let out = if sft { sft_loss(model, batches, &s) } else { bdlm_loss(model, batches, &s) }.unwrap();
        let n = model.num_params();
        let probes = gradcheck::check(
            &gradcheck::probe_indices(n, 12, 11),
            gradcheck::DEFAULT_EPS,
            |i| out.grads.flat_get(i),
            |i, d| {
                let mut p = model.params.clone();
                p.flat_set(i, p.flat_get(i) + d);
                loss_value(&model.with_params(p), batches, &s, sft).unwrap()
            },
        );
        gradcheck::max_rel_error(&probes)
    }

    #[test]
    fn bdlm_gradients_match_finite_differences() {
        for moe in [false, true] {
            let cfg = tiny(moe, 6);
            let model = Model::init_scaled(cfg.clone(), 5, 0.5).unwrap();
            assert!(model.num_params() <= 1000);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let s = NoiseSchedule::linear();
            let batches: Vec<MaskedBatch> = (0..2)
                .map(|j| {
                    let x0 = seq(&cfg, vec![1, 4, 2, 0, 5, 3]);
                    corrupt(&x0, 0, 0.3 + 0.4 * j as f64, &s, cfg.vocab.mask_id(), &mut rng).unwrap()
                })
                .collect();
            let err = check_model_grads(&model, &batches, false);
            assert!(err < 1e-4, "moe={moe} max rel error {err}");
        }
    }

    #[test]
    fn sft_gradients_match_finite_differences() {
        let cfg = tiny(true, 6);
        let model = Model::init_scaled(cfg.clone(), 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = NoiseSchedule::linear();
        let a = corrupt(&seq(&cfg, vec![1, 2, 3, 4, 5]), 1, 0.6, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
        let b = corrupt(&seq(&cfg, vec![5, 4, 3, 2, 1, 0, 1]), 3, 0.9, &s, cfg.vocab.mask_id(), &mut rng).unwrap();
        let err = check_model_grads(&model, &[a, b], true);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn reweighting() {
        assert!((mask_weight(9) - 1.0 / 3.0).abs() < 1e-15);
        let cfg = tiny(false, 6);
        let model = Model::init_scaled(cfg.clone(), 0, 0.0).unwrap();
        let s = NoiseSchedule::linear();
        let mask = cfg.vocab.mask_id();
        let one = seq(&cfg, vec![1, 2, 3]);
        let a = MaskedBatch::from_flags(&one, 1, 0.5, vec![false, true, false], mask);
        let single = sft_loss(&model, std::slice::from_ref(&a), &s).unwrap().loss;
        let double = sft_loss(&model, &[a.clone(), a.clone()], &s).unwrap().loss;
        assert!((single - double).abs() < 1e-12);

        // masked counts 1 and 100 with identical per-token NLL (uniform model)
        let long = seq(&cfg, vec![1; 101]);
        let mut flags = vec![true; 101];
        flags[0] = false;
        let b = MaskedBatch::from_flags(&long, 1, 0.5, flags, mask);
        let out = sft_loss(&model, &[a, b], &s).unwrap();
        let contrib: Vec<f64> = out.per_sample.iter().map(|p| mask_weight(p.masked) * p.loss).collect();
        assert!((contrib[1] / contrib[0] - 10.0).abs() < 1e-12);
        let lo = out.per_sample.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
        let hi = out.per_sample.iter().map(|p| p.loss).fold(0.0, f64::max);
        assert!(out.loss >= lo && out.loss <= hi);
    }

    #[test]
    fn rejects_empty_and_unprompted() {
        let cfg = tiny(false, 6);
        let model = Model::init(cfg.clone(), 0).unwrap();
        let s = NoiseSchedule::linear();
        assert!(matches!(bdlm_loss(&model, &[], &s), Err(Error::EmptyBatch)));
        let x0 = seq(&cfg, vec![1, 2]);
        let b = MaskedBatch::from_flags(&x0, 0, 0.5, vec![true, false], cfg.vocab.mask_id());
        assert!(sft_loss(&model, &[b], &s).is_err());
        let clean = MaskedBatch::from_flags(&x0, 0, 0.5, vec![false, false], cfg.vocab.mask_id());
        assert!(matches!(bdlm_loss(&model, &[clean], &s), Err(Error::NoMaskedTokens)));
    }

    #[test]
    fn uniform_four_way_cross_entropy() {
        let mut t = Tape::new();
        let v = t.constant(crate::tensor::Matrix::zeros(2, 4));
        let ce = t.cross_entropy(v, &[(0, 1, 2.0), (1, 3, 2.0)]);
        assert!((t.value(ce).data()[0] - 4.0 * 4f64.ln()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn raising_true_logit_never_increases_nll(
                logits in proptest::collection::vec(-5.0f64..5.0, 6),
                target in 0usize..6,
                bump in 0.0f64..3.0,
            ) {
                let eval = |l: Vec<f64>| {
                    let mut t = Tape::new();
                    let v = t.constant(crate::tensor::Matrix::from_vec(1, 6, l));
                    let ce = t.cross_entropy(v, &[(0, target, 2.0)]);
                    t.value(ce).data()[0]
                };
                let mut raised = logits.clone();
                raised[target] += bump;
                prop_assert!(eval(raised) <= eval(logits) + 1e-12);
            }
        }
    }
}

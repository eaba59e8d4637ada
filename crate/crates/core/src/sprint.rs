//! Prefix importance scoring, modality-aware KV-cache pruning and
//! confidence-adaptive unmasking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PrefixCache;
use crate::tensor::{softmax, Matrix};
use crate::vocab::Modality;

/// Guards `⌊r·n⌋` against products like `0.29 · 100 = 28.999…`.
const RATIO_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub alpha: f64,
    pub r_text: f64,
    pub r_img: f64,
    pub r_global: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { alpha: 0.5, r_text: 1.0, r_img: 0.8, r_global: 0.5 }
    }
}

impl PruneConfig {
    /// Keeps every prefix position.
    pub fn full() -> Self {
        Self { alpha: 0.5, r_text: 1.0, r_img: 1.0, r_global: 1.0 }
    }

    pub fn is_full(&self) -> bool {
        self.r_text >= 1.0 && self.r_img >= 1.0 && self.r_global >= 1.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("alpha", self.alpha), ("r_text", self.r_text), ("r_img", self.r_img), ("r_global", self.r_global)]
        {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub position: usize,
    pub key_norm_importance: f64,
    pub confidence: f64,
    pub score: f64,
    pub modality: Modality,
    /// Never evicted: special tokens and the prompt's final token.
    pub pinned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum UnmaskMode {
    Fixed,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnmaskPolicy {
    pub tau: f64,
    pub total_steps: usize,
    pub mode: UnmaskMode,
}

impl Default for UnmaskPolicy {
    fn default() -> Self {
        Self { tau: 0.95, total_steps: 8, mode: UnmaskMode::Adaptive }
    }
}

impl UnmaskPolicy {
    /// `tau` is unused in FIXED mode.
    pub fn fixed(total_steps: usize) -> Self {
        Self { tau: 1.0, total_steps, mode: UnmaskMode::Fixed }
    }

    pub fn adaptive(tau: f64, total_steps: usize) -> Self {
        Self { tau, total_steps, mode: UnmaskMode::Adaptive }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau = {} must be >= 0", self.tau)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-slot key norm averaged over layers.
pub fn layer_mean_key_norms(cache: &PrefixCache) -> Vec<f64> {
    let n = cache.len();
    let layers = cache.layers();
    let mut out = vec![0.0; n];
    for l in layers {
        for (slot, o) in out.iter_mut().enumerate() {
            *o += l.keys.row(slot).iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }
    for o in &mut out {
        *o /= layers.len() as f64;
    }
    out
}

/// Top-1 softmax probability per row.
pub fn max_probabilities(logits: &Matrix) -> Vec<f64> {
    (0..logits.rows()).map(|r| softmax(logits.row(r)).into_iter().fold(0.0, f64::max)).collect()
}

/// Scores every cached slot. `logits` has one row per slot in retained
/// order; `modalities` is indexed by original position.
pub fn score_prefix(
    cache: &PrefixCache,
    logits: &Matrix,
    modalities: &[Modality],
    prompt_len: usize,
    cfg: &PruneConfig,
) -> Result<Vec<ImportanceRecord>> {
    if cache.is_empty() {
        return Ok(Vec::new());
    }
    if logits.rows() != cache.len() {
        return Err(Error::Shape(format!("{} logit rows for {} cached slots", logits.rows(), cache.len())));
    }
    let norms = layer_mean_key_norms(cache);
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let conf = max_probabilities(logits);
    cache
        .retained()
        .iter()
        .enumerate()
        .map(|(slot, &pos)| {
            let modality =
                *modalities.get(pos).ok_or_else(|| Error::Shape(format!("no modality for position {pos}")))?;
            let imp = if mean > 0.0 { norms[slot] / mean } else { 1.0 };
            Ok(ImportanceRecord {
                position: pos,
                key_norm_importance: imp,
                confidence: conf[slot],
                score: cfg.alpha * imp + (1.0 - cfg.alpha) * conf[slot],
                modality,
                pinned: modality == Modality::Special || pos + 1 == prompt_len,
            })
        })
        .collect()
}

fn keep_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + RATIO_SLACK).floor() as usize).min(n)
}

/// Higher score first; ties favour the lower position.
fn by_rank(a: &ImportanceRecord, b: &ImportanceRecord) -> Ordering {
    b.score.total_cmp(&a.score).then(a.position.cmp(&b.position))
}

/// Slot indices (ascending) surviving the per-modality ratios and the
/// global cap.
pub fn retained_slots(records: &[ImportanceRecord], cfg: &PruneConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut keep = vec![false; records.len()];
    let kept_by = |modality: Modality, ratio: f64, keep: &mut [bool]| {
        let mut idx: Vec<usize> =
            (0..records.len()).filter(|&i| !records[i].pinned && records[i].modality == modality).collect();
        idx.sort_by(|&a, &b| by_rank(&records[a], &records[b]));
        let k = keep_count(ratio, idx.len());
        for &i in &idx[..k] {
            keep[i] = true;
        }
    };
    kept_by(Modality::Text, cfg.r_text, &mut keep);
    kept_by(Modality::Image, cfg.r_img, &mut keep);
    for (i, r) in records.iter().enumerate() {
        if r.pinned {
            keep[i] = true;
        }
    }

    let cap = keep_count(cfg.r_global, records.len());
    let mut excess = keep.iter().filter(|&&k| k).count().saturating_sub(cap);
    for modality in [Modality::Image, Modality::Text] {
        if excess == 0 {
            break;
        }
        let mut idx: Vec<usize> =
            (0..records.len()).filter(|&i| keep[i] && !records[i].pinned && records[i].modality == modality).collect();
        idx.sort_by(|&a, &b| by_rank(&records[a], &records[b]));
        for &i in idx.iter().rev().take(excess) {
            keep[i] = false;
            excess -= 1;
        }
    }
    let slots: Vec<usize> = (0..records.len()).filter(|&i| keep[i]).collect();
    if slots.is_empty() && !records.is_empty() {
        return Err(Error::EmptyRetention);
    }
    Ok(slots)
}

/// Evicts low-importance slots. Full retention returns the cache unchanged.
pub fn prune_prefix(records: &[ImportanceRecord], cache: &PrefixCache, cfg: &PruneConfig) -> Result<PrefixCache> {
    if records.len() != cache.len() || records.iter().zip(cache.retained()).any(|(r, &p)| r.position != p) {
        return Err(Error::Shape("importance records do not match the cache".into()));
    }
    if cfg.is_full() {
        cfg.validate()?;
        return Ok(cache.clone());
    }
    let slots = retained_slots(records, cfg)?;
    Ok(cache.select_slots(&slots))
}

/// `⌈m / remaining_steps⌉`.
pub fn acceptance_floor(m: usize, remaining_steps: usize) -> usize {
    m.div_ceil(remaining_steps.max(1))
}

/// Indices (ascending) of masked positions to commit this step.
pub fn select_unmask(confidences: &[f64], policy: &UnmaskPolicy, remaining_steps: usize) -> Vec<usize> {
    let m = confidences.len();
    if m == 0 {
        return Vec::new();
    }
    let floor = acceptance_floor(m, remaining_steps);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut accept = vec![false; m];
    let mut count = 0;
    if policy.mode == UnmaskMode::Adaptive {
        for (i, &c) in confidences.iter().enumerate() {
            if c > policy.tau {
                accept[i] = true;
                count += 1;
            }
        }
    }
    for &i in &order {
        if count >= floor {
            break;
        }
        if !accept[i] {
            accept[i] = true;
            count += 1;
        }
    }
    (0..m).filter(|&i| accept[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKv;

    fn cache_with_norms(norms: &[f64]) -> PrefixCache {
        let mut c = PrefixCache::empty(1, 2);
        let keys = Matrix::from_vec(norms.len(), 2, norms.iter().flat_map(|&n| [n, 0.0]).collect());
        let positions: Vec<usize> = (0..norms.len()).collect();
        c.append(&positions, vec![LayerKv { keys: keys.clone(), values: keys }]).unwrap();
        c
    }

    /// Logits whose softmax maximum over 2 classes is `c`.
    fn logits_for(conf: &[f64]) -> Matrix {
        Matrix::from_vec(conf.len(), 2, conf.iter().flat_map(|&c| [(c / (1.0 - c)).ln(), 0.0]).collect())
    }

    fn record(position: usize, score: f64, modality: Modality) -> ImportanceRecord {
        ImportanceRecord { position, key_norm_importance: 1.0, confidence: 0.5, score, modality, pinned: false }
    }

    #[test]
    fn score_example() {
        let cache = cache_with_norms(&[2.0, 1.0, 1.0]);
        let recs =
            score_prefix(&cache, &logits_for(&[0.5, 0.5, 0.5]), &[Modality::Text; 3], 0, &PruneConfig::default())
                .unwrap();
        let imp: Vec<f64> = recs.iter().map(|r| r.key_norm_importance).collect();
        let s: Vec<f64> = recs.iter().map(|r| r.score).collect();
        for (a, b) in imp.iter().zip([1.5, 0.75, 0.75]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s.iter().zip([1.0, 0.625, 0.625]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(recs[1].score, recs[2].score);
    }

    #[test]
    fn blend_endpoints() {
        let cache = cache_with_norms(&[3.0, 1.0]);
        let logits = logits_for(&[0.6, 0.9]);
        let mods = [Modality::Text; 2];
        let key_only =
            score_prefix(&cache, &logits, &mods, 0, &PruneConfig { alpha: 1.0, ..PruneConfig::full() }).unwrap();
        assert!(key_only[0].score > key_only[1].score);
        let conf_only =
            score_prefix(&cache, &logits, &mods, 0, &PruneConfig { alpha: 0.0, ..PruneConfig::full() }).unwrap();
        assert!(conf_only[1].score > conf_only[0].score);
    }

    #[test]
    fn empty_prefix_scores_nothing() {
        let cache = PrefixCache::empty(2, 4);
        let recs = score_prefix(&cache, &Matrix::zeros(0, 3), &[], 0, &PruneConfig::default()).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn image_ratio_keeps_top_eight() {
        let scores = [0.5, 0.1, 0.9, 0.3, 0.3, 0.8, 0.7, 0.2, 0.6, 0.4];
        let recs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| record(i, s, Modality::Image)).collect();
        let cfg = PruneConfig { r_img: 0.8, r_global: 1.0, ..PruneConfig::full() };
        let slots = retained_slots(&recs, &cfg).unwrap();
        assert_eq!(slots, vec![0, 2, 3, 4, 5, 6, 8, 9]);

        // ties at the cut keep the lower position
        let tied: Vec<_> = (0..10).map(|i| record(i, if i < 2 { 1.0 } else { 0.5 }, Modality::Image)).collect();
        assert_eq!(retained_slots(&tied, &cfg).unwrap(), vec![0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn global_cap_evicts_image_first() {
        let mut recs: Vec<_> = (0..4).map(|i| record(i, 0.1, Modality::Text)).collect();
        recs.extend((4..8).map(|i| record(i, 0.9, Modality::Image)));
        let cfg = PruneConfig { r_global: 0.5, ..PruneConfig::full() };
        assert_eq!(retained_slots(&recs, &cfg).unwrap(), vec![0, 1, 2, 3]);
        // once image is exhausted text yields, lowest score first
        let cfg = PruneConfig { r_global: 0.25, ..PruneConfig::full() };
        recs[2].score = 0.2;
        recs[0].score = 0.15;
        assert_eq!(retained_slots(&recs, &cfg).unwrap(), vec![0, 2]);
    }

    #[test]
    fn pinned_positions_survive() {
        let mut recs: Vec<_> = (0..4).map(|i| record(i, 0.1, Modality::Text)).collect();
        recs[1].pinned = true;
        recs[3].modality = Modality::Special;
        recs[3].pinned = true;
        let cfg = PruneConfig { r_text: 0.0, r_img: 0.0, r_global: 0.0, alpha: 0.5 };
        assert_eq!(retained_slots(&recs, &cfg).unwrap(), vec![1, 3]);
        recs[1].pinned = false;
        recs[3].pinned = false;
        recs[3].modality = Modality::Text;
        assert!(matches!(retained_slots(&recs, &cfg), Err(Error::EmptyRetention)));
    }

    #[test]
    fn full_retention_is_identity() {
        let cache = cache_with_norms(&[1.0, 2.0, 3.0]);
        let recs = score_prefix(&cache, &logits_for(&[0.5, 0.6, 0.7]), &[Modality::Image; 3], 0, &PruneConfig::full())
            .unwrap();
        assert_eq!(prune_prefix(&recs, &cache, &PruneConfig::full()).unwrap(), cache);
        let pruned = prune_prefix(&recs, &cache, &PruneConfig { r_img: 0.34, ..PruneConfig::full() }).unwrap();
        assert_eq!(pruned.retained(), &[2]);
        assert_eq!(pruned.layers()[0].keys.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn unmask_examples() {
        let p = UnmaskPolicy::adaptive(0.95, 8);
        assert_eq!(select_unmask(&[0.99, 0.5, 0.96, 0.2], &p, 8), vec![0, 2]);
        assert_eq!(select_unmask(&[0.1; 5], &p, 2), vec![0, 1, 2]);
        assert_eq!(select_unmask(&[0.2, 0.1, 0.3, 0.1, 0.05], &p, 2), vec![0, 1, 2]);
        assert_eq!(select_unmask(&[0.3, 0.01, 0.2], &UnmaskPolicy::adaptive(0.0, 8), 8).len(), 3);
        let fixed = UnmaskPolicy { tau: 0.0, ..UnmaskPolicy::fixed(4) };
        assert_eq!(select_unmask(&[0.9, 0.99, 0.98, 0.1], &fixed, 4), vec![1]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn drains_within_budget(
                stream in proptest::collection::vec(0.0f64..1.0, 64),
                m0 in 1usize..20,
                t_total in 1usize..10,
                tau in prop_oneof![Just(0.0), Just(0.5), Just(0.93), Just(0.95), Just(1.5)],
            ) {
                let p = UnmaskPolicy::adaptive(tau, t_total);
                let mut m = m0;
                let mut draw = stream.iter().cycle();
                let mut step = 0;
                while m > 0 {
                    prop_assert!(step < t_total);
                    let conf: Vec<f64> = (0..m).map(|_| *draw.next().unwrap()).collect();
                    let a = select_unmask(&conf, &p, t_total - step);
                    prop_assert!(!a.is_empty());
                    if tau > 1.0 {
                        prop_assert_eq!(a.len(), acceptance_floor(m, t_total - step));
                    }
                    m -= a.len();
                    step += 1;
                }
            }

            #[test]
            fn retention_respects_score_order(
                scores in proptest::collection::vec(0.0f64..2.0, 1..24),
                img in proptest::collection::vec(any::<bool>(), 24),
                r_text in 0.0f64..=1.0,
                r_img in 0.0f64..=1.0,
                r_global in 0.0f64..=1.0,
            ) {
                let recs: Vec<_> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| record(i, s, if img[i] { Modality::Image } else { Modality::Text }))
                    .collect();
                let cfg = PruneConfig { alpha: 0.5, r_text, r_img, r_global };
                let Ok(slots) = retained_slots(&recs, &cfg) else { return Ok(()) };
                let kept: Vec<bool> = (0..recs.len()).map(|i| slots.contains(&i)).collect();
                for i in 0..recs.len() {
                    for j in 0..recs.len() {
                        if kept[i] && !kept[j] && recs[i].modality == recs[j].modality {
                            prop_assert!(recs[i].score >= recs[j].score);
                        }
                    }
                }
                prop_assert!(slots.len() <= keep_count(r_global, recs.len()));
            }
        }
    }
}

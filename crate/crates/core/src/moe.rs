//! Top-k expert routing with scaled gate outputs and the auxiliary-loss-free
//! bias update.
//!
//! The bias only steers *selection*; combine weights are a softmax over the
//! selected experts' scaled logits without bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax;

pub const DEFAULT_GATE_SCALE: f64 = 2.5;
pub const DEFAULT_UPDATE_RATE: f64 = -0.01;
pub const DEFAULT_LOAD_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_gate_scale")]
    pub gate_scale: f64,
    /// Signed; negative lowers the bias of overloaded experts.
    #[serde(default = "default_update_rate")]
    pub update_rate: f64,
    #[serde(default = "default_load_decay")]
    pub load_decay: f64,
    /// Hidden width of each expert.
    pub d_expert: usize,
}

fn default_gate_scale() -> f64 {
    DEFAULT_GATE_SCALE
}
fn default_update_rate() -> f64 {
    DEFAULT_UPDATE_RATE
}
fn default_load_decay() -> f64 {
    DEFAULT_LOAD_DECAY
}

impl MoEConfig {
    pub fn new(n_experts: usize, top_k: usize, d_expert: usize) -> Self {
        Self {
            n_experts,
            top_k,
            gate_scale: DEFAULT_GATE_SCALE,
            update_rate: DEFAULT_UPDATE_RATE,
            load_decay: DEFAULT_LOAD_DECAY,
            d_expert,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!("top_k {} must lie in [1, n_experts={}]", self.top_k, self.n_experts)));
        }
        if !(self.gate_scale > 0.0) {
            return Err(Error::Config("gate_scale must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.load_decay) {
            return Err(Error::Config("load_decay must lie in [0, 1)".into()));
        }
        if self.d_expert == 0 {
            return Err(Error::Config("d_expert must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub bias: Vec<f64>,
    /// Running estimate of the selection frequency `F`.
    pub load: Vec<f64>,
    /// Batches folded into `load`; the first one replaces the uniform prior.
    pub observations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RouterState {
    pub fn new(n_experts: usize) -> Self {
        Self { bias: vec![0.0; n_experts], load: vec![1.0 / n_experts as f64; n_experts], observations: 0 }
    }

    pub fn n_experts(&self) -> usize {
        self.bias.len()
    }

    /// `Q = [1/n, ..., 1/n]`.
    pub fn target(&self) -> Vec<f64> {
        vec![1.0 / self.n_experts() as f64; self.n_experts()]
    }

    /// `max_i |F_i − 1/n|`.
    pub fn max_load_gap(&self) -> f64 {
        max_load_gap(&self.load)
    }

    /// Folds one batch's selection frequencies into the EMA `F`.
    pub fn record_batch(&mut self, freqs: &[f64], decay: f64) {
        assert_eq!(freqs.len(), self.n_experts());
        if self.observations == 0 {
            self.load.copy_from_slice(freqs);
        } else {
            for (f, &x) in self.load.iter_mut().zip(freqs) {
                *f = decay * *f + (1.0 - decay) * x;
            }
        }
        self.observations += 1;
    }

    /// `b_i ← b_i + u·(F_i − Q_i)/RMS(F − Q)`. No-op when `F = Q`.
    pub fn update_bias(&mut self, observed_load: &[f64], u: f64) {
        assert_eq!(observed_load.len(), self.n_experts());
        let n = self.n_experts() as f64;
        let err: Vec<f64> = observed_load.iter().map(|f| f - 1.0 / n).collect();
        let rms = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        if rms == 0.0 {
            return;
        }
        for (b, e) in self.bias.iter_mut().zip(&err) {
            *b += u * e / rms;
        }
    }

    /// EMA update followed by a bias step against the smoothed load.
    pub fn step(&mut self, batch_freqs: &[f64], cfg: &MoEConfig) {
        self.record_batch(batch_freqs, cfg.load_decay);
        let load = self.load.clone();
        self.update_bias(&load, cfg.update_rate);
    }
}

pub fn max_load_gap(load: &[f64]) -> f64 {
    let q = 1.0 / load.len() as f64;
    load.iter().map(|f| (f - q).abs()).fold(0.0, f64::max)
}

/// Top-k by `gate_scale·logit + bias`, ties to the lower index.
pub fn select_experts(gate_logits: &[f64], bias: &[f64], cfg: &MoEConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gate_logits.len()).collect();
    let score = |i: usize| cfg.gate_scale * gate_logits[i] + bias[i];
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    order
}

pub fn route(gate_logits: &[f64], state: &RouterState, cfg: &MoEConfig) -> Routing {
    assert_eq!(gate_logits.len(), cfg.n_experts, "one gate logit per expert");
    let experts = select_experts(gate_logits, &state.bias, cfg);
    let scaled: Vec<f64> = experts.iter().map(|&e| cfg.gate_scale * gate_logits[e]).collect();
    Routing { weights: softmax(&scaled), experts }
}

/// Per-expert selection frequency over a batch of routings; sums to 1.
pub fn selection_frequencies(routings: &[Routing], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_experts];
    let mut total = 0.0;
    for r in routings {
        for &e in &r.experts {
            counts[e] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for c in &mut counts {
            *c /= total;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSnapshot {
    pub step: usize,
    pub load: Vec<f64>,
    pub bias: Vec<f64>,
    pub gap: f64,
}

/// Load trajectory for a stream where every token carries `gate_logits`.
/// Snapshot 0 is the first batch's load before any bias update; snapshot
/// `k` follows the `k`-th bias update and the batch routed after it.
pub fn simulate_fixed_stream(
    gate_logits: &[f64],
    tokens_per_batch: usize,
    updates: usize,
    cfg: &MoEConfig,
) -> Result<Vec<LoadSnapshot>> {
    cfg.validate()?;
    if gate_logits.len() != cfg.n_experts || tokens_per_batch == 0 {
        return Err(Error::Config("need one gate logit per expert and a non-empty batch".into()));
    }
    let mut state = RouterState::new(cfg.n_experts);
    let batch = |state: &RouterState| {
        let routings: Vec<Routing> = (0..tokens_per_batch).map(|_| route(gate_logits, state, cfg)).collect();
        selection_frequencies(&routings, cfg.n_experts)
    };
    let snap = |step: usize, s: &RouterState| LoadSnapshot {
        step,
        load: s.load.clone(),
        bias: s.bias.clone(),
        gap: s.max_load_gap(),
    };
    let first = batch(&state);
    state.record_batch(&first, cfg.load_decay);
    let mut out = vec![snap(0, &state)];
    for step in 1..=updates {
        let load = state.load.clone();
        state.update_bias(&load, cfg.update_rate);
        let freqs = batch(&state);
        state.record_batch(&freqs, cfg.load_decay);
        out.push(snap(step, &state));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize) -> MoEConfig {
        MoEConfig::new(n, k, 4)
    }

    #[test]
    fn argmax_with_scale() {
        let r = route(&[1.0, 2.0], &RouterState::new(2), &cfg(2, 1));
        assert_eq!(r.experts, vec![1]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn bias_steers_selection() {
        let mut s = RouterState::new(2);
        s.bias = vec![0.1, 0.0];
        assert_eq!(route(&[0.0, 0.0], &s, &cfg(2, 1)).experts, vec![0]);
        // exact tie goes to the lower index
        assert_eq!(route(&[0.0, 0.0], &RouterState::new(2), &cfg(2, 1)).experts, vec![0]);
    }

    #[test]
    fn combine_weights_ignore_bias() {
        let logits = [0.3, -0.2, 0.9, 0.1];
        let c = cfg(4, 2);
        let a = route(&logits, &RouterState::new(4), &c);
        let mut s = RouterState::new(4);
        s.bias = vec![0.01, -0.02, 0.03, 0.0];
        let b = route(&logits, &s, &c);
        assert_eq!(a.experts, b.experts);
        assert_eq!(a.weights, b.weights);
        let expected = softmax(&[2.5 * 0.9, 2.5 * 0.3]);
        assert_eq!(a.weights, expected);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bias_update_arithmetic() {
        let mut s = RouterState::new(2);
        s.update_bias(&[0.75, 0.25], -0.01);
        assert!((s.bias[0] + 0.01).abs() < 1e-15);
        assert!((s.bias[1] - 0.01).abs() < 1e-15);

        let mut s = RouterState::new(4);
        s.update_bias(&[0.25; 4], -0.01);
        assert_eq!(s.bias, vec![0.0; 4]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(cfg(4, 0).validate().is_err());
        assert!(cfg(4, 5).validate().is_err());
        let mut c = cfg(4, 1);
        c.gate_scale = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn balancing_shrinks_gap() {
        let c = cfg(4, 1);
        let mut s = RouterState::new(4);
        let logits = [2.0, 0.0, 0.0, 0.0];
        let mut first_gap = None;
        for _ in 0..500 {
            let routings: Vec<Routing> = (0..16).map(|_| route(&logits, &s, &c)).collect();
            s.step(&selection_frequencies(&routings, 4), &c);
            first_gap.get_or_insert(s.max_load_gap());
        }
        assert!(s.max_load_gap() < first_gap.unwrap());
        assert!(s.load.iter().all(|&f| f >= 0.05), "{:?}", s.load);
        assert!((s.load.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simulated_stream_balances() {
        let traj = simulate_fixed_stream(&[2.0, 0.0, 0.0, 0.0], 16, 500, &cfg(4, 1)).unwrap();
        assert_eq!(traj.len(), 501);
        assert_eq!(traj[0].load, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((traj[0].gap - 0.75).abs() < 1e-15);
        assert!(traj[500].gap < traj[0].gap);
        assert!(traj[500].load.iter().all(|&f| f >= 0.05), "{:?}", traj[500].load);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn update_is_scale_invariant(
                raw in proptest::collection::vec(0.01f64..1.0, 2..8),
                k in 0.1f64..10.0,
            ) {
                let n = raw.len();
                let sum: f64 = raw.iter().sum();
                let f: Vec<f64> = raw.iter().map(|x| x / sum).collect();
                let q = 1.0 / n as f64;
                // F' = Q + k (F − Q) has the same normalized error
                let scaled: Vec<f64> = f.iter().map(|x| q + k * (x - q)).collect();
                let mut a = RouterState::new(n);
                let mut b = RouterState::new(n);
                a.update_bias(&f, -0.01);
                b.update_bias(&scaled, -0.01);
                for (x, y) in a.bias.iter().zip(&b.bias) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn selection_invariant_to_gate_scale(
                logits in proptest::collection::vec(-3.0f64..3.0, 2..8),
                s in 0.1f64..10.0,
            ) {
                let n = logits.len();
                let mut c = MoEConfig::new(n, n.div_ceil(2), 4);
                let base = select_experts(&logits, &vec![0.0; n], &c);
                c.gate_scale = s;
                prop_assert_eq!(base, select_experts(&logits, &vec![0.0; n], &c));
            }

            #[test]
            fn weights_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..10)) {
                let n = logits.len();
                let c = MoEConfig::new(n, n, 4);
                let r = route(&logits, &RouterState::new(n), &c);
                prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

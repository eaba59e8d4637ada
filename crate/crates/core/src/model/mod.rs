//! Toy block-diffusion transformer: token embeddings, 1D rotary positions,
//! block-wise attention with a prefix KV cache, RMS normalization, dense or
//! MoE feed-forward, and a full-vocabulary head.
//!
//! The same graph builder serves inference (parameters as constants) and
//! training (parameters as tape leaves), so the two paths cannot drift.

mod cache;
mod mask;
mod params;

use std::path::Path;

pub use cache::{LayerKv, PrefixCache};
pub use mask::{build_block_mask, AttentionMask, BlockLayout};
pub use params::{Expert, FeedForward, LayerWeights, ModelConfig, ModelParams, ModelWeights, INIT_SCALE};

use crate::autodiff::{rope_apply, Tape, Var};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::moe::{route, selection_frequencies, RouterState, Routing};
use crate::tensor::Matrix;
use crate::vocab::TokenId;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// One entry per layer; `Some` exactly for MoE layers.
    pub routers: Vec<Option<RouterState>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `inputs × vocab`.
    pub logits: Matrix,
    pub positions: Vec<usize>,
    /// Keys and values of the input positions, per layer.
    pub new_kv: Vec<LayerKv>,
    /// Query/key pairs enabled by the mask.
    pub attended: u64,
    /// Per-layer expert selection frequencies (empty for dense layers).
    pub expert_load: Vec<Vec<f64>>,
}

impl ForwardOutput {
    /// The prior cache (or an empty one) extended with this call's positions.
    pub fn extend_cache(&self, prior: Option<&PrefixCache>, n_layers: usize, d_model: usize) -> Result<PrefixCache> {
        let mut cache = prior.cloned().unwrap_or_else(|| PrefixCache::empty(n_layers, d_model));
        cache.append(&self.positions, self.new_kv.clone())?;
        Ok(cache)
    }
}

pub(crate) struct Graph {
    pub logits: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub attended: u64,
    pub routings: Vec<Vec<Routing>>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let routers =
            (0..config.n_layers).map(|_| config.moe.as_ref().map(|m| RouterState::new(m.n_experts))).collect();
        let model = Self { config, params, routers };
        model.check_shapes()?;
        Ok(model)
    }

    /// Seeded uniform init in `[−0.02, 0.02]`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_scaled(config, seed, INIT_SCALE)
    }

    pub fn init_scaled(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed, scale);
        Self::new(config, params)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = ModelParams::init(&self.config, 0, 0.0);
        let want = reference.tensors();
        let have = self.params.tensors();
        if want.len() != have.len() {
            return Err(Error::Shape(format!("{} tensors, expected {}", have.len(), want.len())));
        }
        for ((name, w), h) in reference.names().iter().zip(&want).zip(&have) {
            if w.shape() != h.shape() {
                return Err(Error::Shape(format!("{name}: {:?} != {:?}", h.shape(), w.shape())));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn empty_cache(&self) -> PrefixCache {
        PrefixCache::empty(self.config.n_layers, self.config.d_model)
    }

    pub fn with_params(&self, params: ModelParams) -> Self {
        Self { config: self.config.clone(), params, routers: self.routers.clone() }
    }

    /// Forward pass over `ids` at original `positions`, attending to `cache`
    /// and to each other as permitted by `mask` (indexed by original position).
    pub fn forward(
        &self,
        ids: &[TokenId],
        positions: &[usize],
        cache: Option<&PrefixCache>,
        mask: &AttentionMask,
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let w = self.param_vars(&mut tape, false);
        let g = self.build_graph(&mut tape, &w, ids, positions, cache, mask)?;
        let expert_load = g
            .routings
            .iter()
            .map(|r| {
                if r.is_empty() {
                    Vec::new()
                } else {
                    let n = self.config.moe.as_ref().map_or(0, |m| m.n_experts);
                    selection_frequencies(r, n)
                }
            })
            .collect();
        let new_kv = g
            .keys
            .iter()
            .zip(&g.values)
            .map(|(&k, &v)| LayerKv { keys: tape.value(k).clone(), values: tape.value(v).clone() })
            .collect();
        Ok(ForwardOutput {
            logits: tape.value(g.logits).clone(),
            positions: positions.to_vec(),
            new_kv,
            attended: g.attended,
            expert_load,
        })
    }

    /// Forward and return the logits together with the extended cache.
    pub fn forward_extend(
        &self,
        ids: &[TokenId],
        positions: &[usize],
        cache: Option<&PrefixCache>,
        mask: &AttentionMask,
    ) -> Result<(Matrix, PrefixCache)> {
        let out = self.forward(ids, positions, cache, mask)?;
        let cache = out.extend_cache(cache, self.config.n_layers, self.config.d_model)?;
        Ok((out.logits, cache))
    }

    pub(crate) fn param_vars<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelWeights<Var> {
        self.params.map(&mut |m| if trainable { tape.param(m) } else { tape.constant_ref(m) })
    }

    pub(crate) fn build_graph<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        w: &ModelWeights<Var>,
        ids: &[TokenId],
        positions: &[usize],
        cache: Option<&'a PrefixCache>,
        mask: &AttentionMask,
    ) -> Result<Graph> {
        let cfg = &self.config;
        if ids.len() != positions.len() || ids.is_empty() {
            return Err(Error::Shape(format!("{} ids for {} positions", ids.len(), positions.len())));
        }
        cache::check_increasing(positions)?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size()) {
            return Err(Error::Sequence(format!("token id {bad} out of vocabulary")));
        }
        let cached: &[usize] = cache.map_or(&[], |c| c.retained());
        if let Some(c) = cache {
            if c.layers().len() != cfg.n_layers {
                return Err(Error::Shape("cache layer count".into()));
            }
            if let Some(last) = c.last_position() {
                if positions[0] <= last {
                    return Err(Error::PositionCollision { position: positions[0], last_cached: last });
                }
            }
        }
        let max_pos = *positions.last().unwrap();
        if max_pos >= mask.len() {
            return Err(Error::Shape(format!("position {max_pos} outside mask of {}", mask.len())));
        }

        // visibility of [cached ++ inputs] keys for each input query
        let n_keys = cached.len() + positions.len();
        let mut allowed = Vec::with_capacity(positions.len() * n_keys);
        for &q in positions {
            allowed.extend(cached.iter().chain(positions).map(|&k| mask.allows(q, k)));
        }
        let attended = allowed.iter().filter(|&&a| a).count() as u64;

        let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let mut x = tape.gather(w.embed, &ids_usize);
        let hd = cfg.head_dim();
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut values = Vec::with_capacity(cfg.n_layers);
        let mut routings = Vec::with_capacity(cfg.n_layers);

        for (li, lw) in w.layers.iter().enumerate() {
            let h = tape.rms_norm(x, lw.attn_norm, NORM_EPS);
            let q = tape.matmul(h, lw.wq);
            let q = tape.rope(q, positions, hd, cfg.rope_base);
            let k = tape.matmul(h, lw.wk);
            let k = tape.rope(k, positions, hd, cfg.rope_base);
            let v = tape.matmul(h, lw.wv);
            keys.push(k);
            values.push(v);
            let (k_all, v_all) = match cache {
                Some(c) if !c.is_empty() => {
                    let ck = tape.constant_ref(&c.layers()[li].keys);
                    let cv = tape.constant_ref(&c.layers()[li].values);
                    (tape.vstack(&[ck, k]), tape.vstack(&[cv, v]))
                }
                _ => (k, v),
            };
            let scale = 1.0 / (hd as f64).sqrt();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * hd, hd);
                let kh = tape.slice_cols(k_all, head * hd, hd);
                let vh = tape.slice_cols(v_all, head * hd, hd);
                let scores = tape.matmul_t(qh, kh);
                let scores = tape.scale(scores, scale);
                let probs = tape.masked_softmax(scores, &allowed);
                heads.push(tape.matmul(probs, vh));
            }
            let attn = if heads.len() == 1 { heads[0] } else { tape.hstack(&heads) };
            let attn = tape.matmul(attn, lw.wo);
            x = tape.add(x, attn);

            let h = tape.rms_norm(x, lw.ffn_norm, NORM_EPS);
            let (ffn, layer_routing) = self.feed_forward(tape, li, &lw.ffn, h);
            routings.push(layer_routing);
            x = tape.add(x, ffn);
            if !tape.value(x).all_finite() {
                return Err(Error::NonFinite { layer: li });
            }
        }
        let h = tape.rms_norm(x, w.final_norm, NORM_EPS);
        let logits = tape.matmul(h, w.head);
        if !tape.value(logits).all_finite() {
            return Err(Error::NonFinite { layer: cfg.n_layers });
        }
        Ok(Graph { logits, keys, values, attended, routings })
    }

    fn feed_forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        layer: usize,
        ffn: &FeedForward<Var>,
        h: Var,
    ) -> (Var, Vec<Routing>) {
        match ffn {
            FeedForward::Dense { w_in, w_out } => {
                let a = tape.matmul(h, *w_in);
                let a = tape.silu(a);
                (tape.matmul(a, *w_out), Vec::new())
            }
            FeedForward::Moe { gate, experts } => {
                let moe = self.config.moe.as_ref().expect("moe layer without moe config");
                let fallback;
                let state = match &self.routers[layer] {
                    Some(s) => s,
                    None => {
                        fallback = RouterState::new(moe.n_experts);
                        &fallback
                    }
                };
                let logits = tape.matmul(h, *gate);
                let lv = tape.value(logits);
                let n = lv.rows();
                let routings: Vec<Routing> = (0..n).map(|r| route(lv.row(r), state, moe)).collect();
                let mut selected = vec![false; n * moe.n_experts];
                for (r, rt) in routings.iter().enumerate() {
                    for &e in &rt.experts {
                        selected[r * moe.n_experts + e] = true;
                    }
                }
                // same softmax-over-selected as `route`, kept on the tape for gradients
                let scaled = tape.scale(logits, moe.gate_scale);
                let weights = tape.masked_softmax(scaled, &selected);
                let mut out: Option<Var> = None;
                for (e, ex) in experts.iter().enumerate() {
                    if !routings.iter().any(|rt| rt.experts.contains(&e)) {
                        continue;
                    }
                    let a = tape.matmul(h, ex.w_in);
                    let a = tape.silu(a);
                    let y = tape.matmul(a, ex.w_out);
                    let we = tape.slice_cols(weights, e, 1);
                    let y = tape.scale_rows(y, we);
                    out = Some(match out {
                        Some(acc) => tape.add(acc, y),
                        None => y,
                    });
                }
                (out.expect("every token selects at least one expert"), routings)
            }
        }
    }

    /// Folds the observed per-layer expert load into each router and applies
    /// the bias update.
    pub fn update_routers(&mut self, expert_load: &[Vec<f64>]) {
        let Some(moe) = self.config.moe.clone() else { return };
        for (state, load) in self.routers.iter_mut().zip(expert_load) {
            if let Some(s) = state {
                if !load.is_empty() {
                    s.step(load, &moe);
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(serde_json::to_string(&self.config)?);
        self.params.visit(&mut |name, t| c.push(name, t.clone()));
        for (i, r) in self.routers.iter().enumerate() {
            if let Some(r) = r {
                c.push(format!("layers.{i}.router.bias"), Matrix::row_vector(r.bias.clone()));
                c.push(format!("layers.{i}.router.load_ema"), Matrix::row_vector(r.load.clone()));
            }
        }
        container::write_file(path, &c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read_file(path)?;
        let config: ModelConfig = serde_json::from_str(&c.config_json)?;
        config.validate()?;
        let mut params = ModelParams::init(&config, 0, 0.0);
        let names = params.names();
        let mut idx = 0;
        let mut err = None;
        params.visit_mut(&mut |t| {
            let name = &names[idx];
            match c.get(name) {
                Some(m) if m.shape() == t.shape() => *t = m.clone(),
                Some(m) => {
                    err.get_or_insert(Error::Format(format!("{name}: shape {:?}", m.shape())));
                }
                None => {
                    err.get_or_insert(Error::Format(format!("missing tensor {name}")));
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut model = Model::new(config, params)?;
        for (i, r) in model.routers.iter_mut().enumerate() {
            if let Some(r) = r {
                if let (Some(b), Some(l)) =
                    (c.get(&format!("layers.{i}.router.bias")), c.get(&format!("layers.{i}.router.load_ema")))
                {
                    r.bias = b.data().to_vec();
                    r.load = l.data().to_vec();
                    r.observations = 1;
                }
            }
        }
        Ok(model)
    }
}

/// Standalone rotary embedding on `rows × (heads·head_dim)` vectors.
pub fn apply_rope(x: &Matrix, positions: &[usize], head_dim: usize, rope_base: f64) -> Result<Matrix> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::OddHeadDim(head_dim));
    }
    if !x.cols().is_multiple_of(head_dim) || positions.len() != x.rows() {
        return Err(Error::Shape("rope input does not split into heads".into()));
    }
    Ok(rope_apply(x, positions, head_dim, rope_base, false))
}

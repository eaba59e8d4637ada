use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::MoEConfig;
use crate::tensor::Matrix;
use crate::vocab::TokenVocabulary;

pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab: TokenVocabulary,
    pub block_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub moe: Option<MoEConfig>,
}

fn default_rope_base() -> f64 {
    10000.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("block_size", self.block_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::OddHeadDim(self.head_dim()));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.total_size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward<T> {
    Dense { w_in: T, w_out: T },
    Moe { gate: T, experts: Vec<Expert<T>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    pub w_in: T,
    pub w_out: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub ffn: FeedForward<T>,
}

/// Trainable weights, generic so the same layout can hold matrices,
/// gradients, or tape variables. Field order is the declaration order used
/// by serialization and flat indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub embed: T,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: T,
    pub head: T,
}

pub type ModelParams = ModelWeights<Matrix>;

impl<T> ModelWeights<T> {
    /// Visits every tensor with its name, in declaration order.
    pub fn visit<'s>(&'s self, f: &mut impl FnMut(String, &'s T)) {
        f("embed".into(), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            f(format!("{p}.attn_norm"), &l.attn_norm);
            f(format!("{p}.wq"), &l.wq);
            f(format!("{p}.wk"), &l.wk);
            f(format!("{p}.wv"), &l.wv);
            f(format!("{p}.wo"), &l.wo);
            f(format!("{p}.ffn_norm"), &l.ffn_norm);
            match &l.ffn {
                FeedForward::Dense { w_in, w_out } => {
                    f(format!("{p}.ffn.w_in"), w_in);
                    f(format!("{p}.ffn.w_out"), w_out);
                }
                FeedForward::Moe { gate, experts } => {
                    f(format!("{p}.moe.gate"), gate);
                    for (e, ex) in experts.iter().enumerate() {
                        f(format!("{p}.moe.experts.{e}.w_in"), &ex.w_in);
                        f(format!("{p}.moe.experts.{e}.w_out"), &ex.w_out);
                    }
                }
            }
        }
        f("final_norm".into(), &self.final_norm);
        f("head".into(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.embed);
        for l in &mut self.layers {
            for t in [&mut l.attn_norm, &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.ffn_norm] {
                f(t);
            }
            match &mut l.ffn {
                FeedForward::Dense { w_in, w_out } => {
                    f(w_in);
                    f(w_out);
                }
                FeedForward::Moe { gate, experts } => {
                    f(gate);
                    for ex in experts {
                        f(&mut ex.w_in);
                        f(&mut ex.w_out);
                    }
                }
            }
        }
        f(&mut self.final_norm);
        f(&mut self.head);
    }

    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> ModelWeights<U> {
        ModelWeights {
            embed: f(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: f(&l.attn_norm),
                    wq: f(&l.wq),
                    wk: f(&l.wk),
                    wv: f(&l.wv),
                    wo: f(&l.wo),
                    ffn_norm: f(&l.ffn_norm),
                    ffn: match &l.ffn {
                        FeedForward::Dense { w_in, w_out } => FeedForward::Dense { w_in: f(w_in), w_out: f(w_out) },
                        FeedForward::Moe { gate, experts } => FeedForward::Moe {
                            gate: f(gate),
                            experts: experts.iter().map(|e| Expert { w_in: f(&e.w_in), w_out: f(&e.w_out) }).collect(),
                        },
                    },
                })
                .collect(),
            final_norm: f(&self.final_norm),
            head: f(&self.head),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }
}

impl ModelParams {
    /// Weight matrices uniform in `[−scale, scale]`; norm gains at 1.
    pub fn init(config: &ModelConfig, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size();
        let mut m = |r, c| Matrix::uniform(r, c, scale, &mut rng);
        let embed = m(v, d);
        let layers = (0..config.n_layers)
            .map(|_| {
                let attn_norm = Matrix::filled(1, d, 1.0);
                let (wq, wk, wv, wo) = (m(d, d), m(d, d), m(d, d), m(d, d));
                let ffn_norm = Matrix::filled(1, d, 1.0);
                let ffn = match &config.moe {
                    None => FeedForward::Dense { w_in: m(d, config.d_ff), w_out: m(config.d_ff, d) },
                    Some(moe) => FeedForward::Moe {
                        gate: m(d, moe.n_experts),
                        experts: (0..moe.n_experts)
                            .map(|_| Expert { w_in: m(d, moe.d_expert), w_out: m(moe.d_expert, d) })
                            .collect(),
                    },
                };
                LayerWeights { attn_norm, wq, wk, wv, wo, ffn_norm, ffn }
            })
            .collect();
        let final_norm = Matrix::filled(1, d, 1.0);
        let head = m(d, v);
        Self { embed, layers, final_norm, head }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Matrix::zeros(t.rows(), t.cols()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat read of scalar `index` across all tensors in declaration order.
    pub fn flat_get(&self, index: usize) -> f64 {
        let mut rest = index;
        for t in self.tensors() {
            if rest < t.len() {
                return t.data()[rest];
            }
            rest -= t.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let mut rest = Some(index);
        self.visit_mut(&mut |t| {
            if let Some(r) = rest {
                if r < t.len() {
                    t.data_mut()[r] = value;
                    rest = None;
                } else {
                    rest = Some(r - t.len());
                }
            }
        });
        assert!(rest.is_none(), "flat index {index} out of range");
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        let others = other.tensors();
        let mut i = 0;
        self.visit_mut(&mut |t| {
            for (a, b) in t.data_mut().iter_mut().zip(others[i].data()) {
                *a += scale * b;
            }
            i += 1;
        });
    }
}

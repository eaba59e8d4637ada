//! Run configuration: one strict JSON document with a section per command.
//! Every field has a default, unknown keys are rejected, and the
//! fingerprint is the SHA-256 of the canonical (defaults-filled) JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sprint_core::decoder::periodic_copy_model;
use sprint_core::flow::{FlowTrainConfig, ToyTask};
use sprint_core::gradcheck::{DEFAULT_EPS, DEFAULT_TOLERANCE};
use sprint_core::moe::{DEFAULT_GATE_SCALE, DEFAULT_LOAD_DECAY, DEFAULT_UPDATE_RATE};
use sprint_core::vocab::VocabSpec;
use sprint_core::{DecodePath, MoEConfig, Model, ModelConfig, PruneConfig, TokenId, TokenVocabulary, UnmaskPolicy};

/// Invalid configuration or input schema; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub generate: GenerateSection,
    pub gradcheck: GradcheckSection,
    pub pack: PackSection,
    pub moesim: MoeSimSection,
    pub flow: FlowSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Seeded random weights; the run seed picks the init.
    Random {
        config: ModelConfig,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
    },
    /// The hand-built high-confidence block-copy model.
    Copy { vocab: VocabSpec, block_size: usize },
    /// A model container written by `Model::save`.
    File { path: PathBuf },
}

fn default_init_scale() -> f64 {
    sprint_core::model::INIT_SCALE
}

/// About 166k parameters at block size 8.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_heads: 4,
        n_layers: 4,
        d_ff: 128,
        vocab: TokenVocabulary::build(200, 64, &[256, 512]).expect("static vocabulary"),
        block_size: 8,
        rope_base: 10000.0,
        moe: None,
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Random { config: toy_model_config(), init_scale: default_init_scale() }
    }
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> anyhow::Result<Model> {
        Ok(match self {
            ModelSpec::Random { config, init_scale } => Model::init_scaled(config.clone(), seed, *init_scale)?,
            ModelSpec::Copy { vocab, block_size } => {
                let vocab = TokenVocabulary::try_from(vocab.clone())?;
                periodic_copy_model(vocab, *block_size, seed)?
            }
            ModelSpec::File { path } => Model::load(path)?,
        })
    }

    fn validate(&self) -> anyhow::Result<()> {
        match self {
            ModelSpec::Random { config, init_scale } => {
                config.validate().map_err(|e| config_error(e.to_string()))?;
                if !(init_scale.is_finite() && *init_scale >= 0.0) {
                    return Err(config_error(format!("init_scale {init_scale} must be finite and >= 0")));
                }
            }
            ModelSpec::Copy { vocab, block_size } => {
                TokenVocabulary::try_from(vocab.clone()).map_err(|e| config_error(e.to_string()))?;
                if *block_size == 0 {
                    return Err(config_error("block_size must be >= 1"));
                }
            }
            ModelSpec::File { path } => {
                if !path.exists() {
                    return Err(config_error(format!("model file {} not found", path.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    pub path: DecodePath,
    pub policy: UnmaskPolicy,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// Independent runs; run `r` uses seed `seed + r` for weights and prompt.
    pub runs: usize,
    pub n_blocks: usize,
    /// Length of the random text prompt when `prompt` is absent.
    pub prompt_len: usize,
    pub prompt: Option<Vec<TokenId>>,
    pub variants: Vec<Variant>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            runs: 1,
            n_blocks: 4,
            prompt_len: 8,
            prompt: None,
            variants: vec![
                Variant {
                    label: "baseline".into(),
                    path: DecodePath::Baseline,
                    policy: UnmaskPolicy::fixed(8),
                    prune: PruneConfig::full(),
                    temperature: None,
                },
                Variant {
                    label: "sprint".into(),
                    path: DecodePath::Sprint,
                    policy: UnmaskPolicy::default(),
                    prune: PruneConfig::default(),
                    temperature: None,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub probes: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { probes: 12, eps: DEFAULT_EPS, tolerance: DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackSection {
    pub capacity: usize,
    pub block_size: usize,
    /// Group size for the pad-to-longest comparison.
    pub batch_size: usize,
    pub vocab: VocabSpec,
    pub corpus: Option<PathBuf>,
    /// Where to write the packed sequences (corpus format).
    pub shards: Option<PathBuf>,
}

impl Default for PackSection {
    fn default() -> Self {
        Self {
            capacity: 64,
            block_size: 8,
            batch_size: 8,
            vocab: VocabSpec { text_size: 200, visual_size: 64, resolutions: vec![256, 512] },
            corpus: None,
            shards: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeSimSection {
    pub gate_logits: Vec<f64>,
    pub top_k: usize,
    pub tokens_per_batch: usize,
    pub updates: usize,
    pub gate_scale: f64,
    pub update_rate: f64,
    pub load_decay: f64,
}

impl Default for MoeSimSection {
    fn default() -> Self {
        Self {
            gate_logits: vec![2.0, 0.0, 0.0, 0.0],
            top_k: 1,
            tokens_per_batch: 16,
            updates: 500,
            gate_scale: DEFAULT_GATE_SCALE,
            update_rate: DEFAULT_UPDATE_RATE,
            load_decay: DEFAULT_LOAD_DECAY,
        }
    }
}

impl MoeSimSection {
    pub fn moe_config(&self) -> MoEConfig {
        MoEConfig {
            n_experts: self.gate_logits.len(),
            top_k: self.top_k,
            gate_scale: self.gate_scale,
            update_rate: self.update_rate,
            load_decay: self.load_decay,
            d_expert: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub task: ToyTask,
    pub train: FlowTrainConfig,
    /// Points per cloud in the energy-distance comparison.
    pub samples: usize,
    pub resamplings: usize,
    /// Directory for the teacher and student containers.
    pub save_dir: Option<PathBuf>,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            task: ToyTask::two_gaussians(),
            train: FlowTrainConfig::default(),
            samples: 2048,
            resamplings: 8,
            save_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        let g = &self.generate;
        if g.runs == 0 || g.n_blocks == 0 {
            return Err(config_error("generate.runs and generate.n_blocks must be >= 1"));
        }
        if g.prompt.as_ref().map_or(g.prompt_len, Vec::len) == 0 {
            return Err(config_error("the prompt must be non-empty"));
        }
        let mut labels = std::collections::HashSet::new();
        for v in &g.variants {
            if !labels.insert(v.label.as_str()) {
                return Err(config_error(format!("duplicate variant label {:?}", v.label)));
            }
            let dc = sprint_core::DecodeConfig {
                n_blocks: g.n_blocks,
                policy: v.policy,
                prune: v.prune,
                path: v.path,
                temperature: v.temperature,
            };
            dc.validate().map_err(|e| config_error(format!("variant {}: {e}", v.label)))?;
        }
        let gc = &self.gradcheck;
        if gc.probes == 0 || !(gc.eps > 0.0) || !(gc.tolerance > 0.0) {
            return Err(config_error("gradcheck needs probes >= 1, eps > 0, tolerance > 0"));
        }
        let p = &self.pack;
        if p.capacity == 0 || p.block_size == 0 || p.batch_size == 0 {
            return Err(config_error("pack sizes must be >= 1"));
        }
        TokenVocabulary::try_from(p.vocab.clone()).map_err(|e| config_error(e.to_string()))?;
        let m = &self.moesim;
        m.moe_config().validate().map_err(|e| config_error(e.to_string()))?;
        if m.tokens_per_batch == 0 {
            return Err(config_error("moesim.tokens_per_batch must be >= 1"));
        }
        let f = &self.flow;
        if f.task.means.is_empty() || f.task.means.iter().any(|m| m.len() != f.task.means[0].len() || m.is_empty()) {
            return Err(config_error("flow.task.means must be non-empty vectors of one dimension"));
        }
        if !(f.task.sigma > 0.0) || f.samples < 2 || f.resamplings == 0 {
            return Err(config_error("flow needs sigma > 0, samples >= 2, resamplings >= 1"));
        }
        let t = &f.train;
        if t.batch == 0 || t.hidden == 0 || t.cond_dim == 0 || t.pool_size == 0 || !(t.jvp_eps > 0.0) {
            return Err(config_error("flow.train sizes must be >= 1 and jvp_eps > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_with_stable_fingerprint() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.fingerprint().len(), 64);
    }

    #[test]
    fn toy_model_is_about_200k_params() {
        let m = Model::init(toy_model_config(), 0).unwrap();
        assert!((150_000..250_000).contains(&m.num_params()), "{}", m.num_params());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            r#"{"bogus": 1}"#,
            r#"{"generate": {"runs": 0}}"#,
            r#"{"generate": {"variants": [{"label": "a", "path": "SPRINT", "policy": {"tau": -1}}]}}"#,
            r#"{"moesim": {"top_k": 9}}"#,
            r#"{"pack": {"vocab": {"text_size": 1, "visual_size": 0}}}"#,
            r#"{"model": {"copy": {"vocab": {"text_size": 8, "visual_size": 0}, "block_size": 4, "x": 1}}}"#,
        ] {
            let err = RunConfig::from_json(bad).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some(), "{bad}: {err}");
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let mut cfg = RunConfig::default();
        let a = cfg.fingerprint();
        cfg.generate.n_blocks += 1;
        assert_ne!(a, cfg.fingerprint());
    }
}

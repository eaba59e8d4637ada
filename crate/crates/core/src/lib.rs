//! Block-wise masked-diffusion language model engine.
//!
//! Covers block-attention decoding with a prefix KV cache, MoE routing with
//! bias-based load balancing, the block-diffusion training objectives,
//! sparse prefix retention with confidence-adaptive unmasking, a toy
//! flow-matching decoder with consistency distillation, and sequence packing.

pub mod autodiff;
pub mod container;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod objectives;
pub mod optim;
pub mod packing;
pub mod sprint;
pub mod tensor;
pub mod vocab;

pub use decoder::{generate, DecodeConfig, DecodePath, GenerationResult};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowNet, FlowPath};
pub use model::{AttentionMask, BlockLayout, Model, ModelConfig, ModelParams, PrefixCache};
pub use moe::{MoEConfig, RouterState};
pub use objectives::{Denoiser, MaskedBatch, NoiseSchedule};
pub use packing::{pack, segment_mask, PackedSequence};
pub use sprint::{ImportanceRecord, PruneConfig, UnmaskMode, UnmaskPolicy};
pub use tensor::Matrix;
pub use vocab::{Modality, ModalitySpan, TokenId, TokenSequence, TokenVocabulary};

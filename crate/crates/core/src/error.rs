use thiserror::Error;

/// Errors raised by the engine. Every fallible public operation returns this.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position {position} collides with the prefix cache (last cached position {last_cached})")]
    PositionCollision { position: usize, last_cached: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("odd head dimension {0}: rotary embedding needs pairs")]
    OddHeadDim(usize),

    #[error("pruning would evict every conditioning position")]
    EmptyRetention,

    #[error("no masked tokens in batch")]
    NoMaskedTokens,

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample {id} has length {length} > capacity {capacity}")]
    SampleTooLong { id: u64, length: usize, capacity: usize },

    #[error("block {block} step {step}: {source}")]
    Decode {
        block: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

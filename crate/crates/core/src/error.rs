use thiserror::Error;

use crate::model::BlockId;
use crate::quant::BitWidth;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported bit-width {0} (allowed: 2, 3, 4, 8, 16)")]
    BitWidth(u32),

    #[error("requantization multiplier {0} outside (0, 1]")]
    MultiplierRange(f64),

    #[error("invalid quantization parameters: {0}")]
    QuantParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("accumulator overflow risk in {site}: worst case {worst} exceeds 2^31 - 1")]
    AccumulatorOverflow { site: String, worst: u128 },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: u32, vocab: usize },

    #[error("context overflow: {len} positions exceed max_seq_len {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("truncated checkpoint payload: tensor `{tensor}` needs bytes {start}..{end}, payload has {len}")]
    Truncated {
        tensor: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("checkpoint tensors `{a}` and `{b}` overlap")]
    Overlap { a: String, b: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has unexpected or duplicate tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("model is not calibrated for integer execution: {0}")]
    Uncalibrated(String),

    #[error("assignment has no entry for block {0}")]
    MissingBlock(BlockId),

    #[error("unknown block {0}")]
    UnknownBlock(BlockId),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("exhaustive search over {count} assignments exceeds cap {cap}; use greedy search")]
    ExhaustiveCap { count: u128, cap: u128 },

    #[error("no Pareto point satisfies the degradation constraint (limit {limit})")]
    Unsatisfiable { limit: f64 },

    #[error("vocabulary mismatch: draft has {draft}, target has {target}")]
    VocabMismatch { draft: usize, target: usize },

    #[error("evaluation failed for block {block} at {bits}: {source}")]
    Evaluation {
        block: BlockId,
        bits: BitWidth,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Decoder-only transformer: float reference path, integer path, caches,
//! checkpoints.

mod assignment;
mod cache;
mod calibration;
mod checkpoint;
mod config;
mod forward;
mod int;
mod lm;
mod weights;

pub use assignment::PrecisionAssignment;
pub use cache::{BlockKv, CacheMode, KVCache, KvStore};
pub use calibration::{calibrate, Calibration};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{BlockId, ModelConfig};
pub use forward::{argmax, ForwardOutput, Observer, OpCounts, Site, Trace, LN_EPS};
pub use int::{IntForwardOutput, IntModel, ACT_BITS, VECTOR_BITS, WIDE_BITS};
pub use lm::{decode_greedy, LanguageModel, Logits};
pub use weights::{Block, Embedding, Head, LayerNormParams, Linear, Model, ParamView, ParamViewMut, TokenDrop};

pub(crate) use forward::{dot, linear_row};

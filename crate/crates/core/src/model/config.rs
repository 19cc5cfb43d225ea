use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernels::check_accumulator;
use crate::quant::BitWidth;

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Pinned fixture target.
    pub fn toy() -> Self {
        Self {
            n_blocks: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            max_seq_len: 128,
        }
    }

    /// Pinned fixture draft: same widths, two blocks.
    pub fn toy_draft() -> Self {
        Self {
            n_blocks: 2,
            ..Self::toy()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2 for LayerNorm".into()));
        }
        self.check_accumulators()
    }

    /// Worst-case 32-bit accumulator check for the integer path: 8-bit
    /// symmetric activations against the widest (16-bit) weights, and 16-bit
    /// probabilities against 8-bit values in attention.
    pub fn check_accumulators(&self) -> Result<()> {
        let act = BitWidth::B8.qmax() as u128;
        let weight = BitWidth::B16.qmax() as u128;
        let inner = self.d_model.max(self.d_ff);
        check_accumulator("weight matmul", inner, act, weight, 0)?;
        let probs = (BitWidth::B16.qmax() - BitWidth::B16.qmin()) as u128;
        check_accumulator("attention context", self.max_seq_len, probs, act, 0)?;
        check_accumulator("attention scores", self.d_head(), act, act, 0)
    }

    /// Every block an assignment must cover, in canonical order.
    pub fn block_ids(&self) -> Vec<BlockId> {
        std::iter::once(BlockId::Embedding)
            .chain((0..self.n_blocks).map(BlockId::Transformer))
            .chain(std::iter::once(BlockId::OutputHead))
            .collect()
    }
}

/// Unit of the precision hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Embedding,
    Transformer(usize),
    OutputHead,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embedding => f.write_str("embedding"),
            Self::Transformer(i) => write!(f, "block.{i}"),
            Self::OutputHead => f.write_str("head"),
        }
    }
}

impl FromStr for BlockId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "embedding" | "emb" => Ok(Self::Embedding),
            "head" | "output_head" => Ok(Self::OutputHead),
            other => other
                .strip_prefix("block.")
                .or_else(|| other.strip_prefix('t'))
                .and_then(|i| i.parse().ok())
                .map(Self::Transformer)
                .ok_or_else(|| Error::Invalid(format!("unknown block name `{other}`"))),
        }
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::BitWidth;

use super::config::{BlockId, ModelConfig};

/// Weight bit-width of every block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionAssignment {
    bits_by_block: BTreeMap<BlockId, BitWidth>,
}

impl PrecisionAssignment {
    pub fn uniform(config: &ModelConfig, bits: BitWidth) -> Self {
        Self {
            bits_by_block: config.block_ids().into_iter().map(|b| (b, bits)).collect(),
        }
    }

    pub fn baseline(config: &ModelConfig) -> Self {
        Self::uniform(config, BitWidth::BASELINE)
    }

    pub fn from_map(bits_by_block: BTreeMap<BlockId, BitWidth>) -> Self {
        Self { bits_by_block }
    }

    pub fn get(&self, block: BlockId) -> Result<BitWidth> {
        self.bits_by_block.get(&block).copied().ok_or(Error::MissingBlock(block))
    }

    pub fn set(&mut self, block: BlockId, bits: BitWidth) {
        self.bits_by_block.insert(block, bits);
    }

    pub fn with(mut self, block: BlockId, bits: BitWidth) -> Self {
        self.set(block, bits);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, BitWidth)> + '_ {
        self.bits_by_block.iter().map(|(&b, &w)| (b, w))
    }

    pub fn as_map(&self) -> &BTreeMap<BlockId, BitWidth> {
        &self.bits_by_block
    }

    /// Every block of `config` present and nothing else.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ids = config.block_ids();
        if let Some(&b) = ids.iter().find(|b| !self.bits_by_block.contains_key(b)) {
            return Err(Error::MissingBlock(b));
        }
        if let Some(&b) = self.bits_by_block.keys().find(|b| !ids.contains(b)) {
            return Err(Error::UnknownBlock(b));
        }
        Ok(())
    }
}

/// Compact form `embedding=8,block.0=4,...,head=16`.
impl fmt::Display for PrecisionAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (b, w)) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{b}={w}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for PrecisionAssignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in s.split([',', ' ']).filter(|p| !p.is_empty()) {
            let (b, w) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("assignment entry `{part}` is not block=bits")))?;
            map.insert(b.parse()?, w.parse()?);
        }
        Ok(Self::from_map(map))
    }
}

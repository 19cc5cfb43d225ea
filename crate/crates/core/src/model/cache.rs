use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// Keys and values of one block, row-major `[len, d_model]`; head `h` owns
/// columns `h * d_head .. (h + 1) * d_head`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Clone> BlockKv<T> {
    fn truncate(&mut self, elems: usize) {
        self.k.truncate(elems);
        self.v.truncate(elems);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum KvStore {
    Float(Vec<BlockKv<f32>>),
    /// Codes plus the (key, value) quantizer of each block.
    Int {
        blocks: Vec<BlockKv<i32>>,
        params: Vec<(QuantParams, QuantParams)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    Float,
    Integer,
}

/// Per-block key/value history of one decoding session.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    len: usize,
    max_len: usize,
    d_model: usize,
    store: KvStore,
}

impl KVCache {
    pub fn float(n_blocks: usize, d_model: usize, max_len: usize) -> Self {
        Self {
            len: 0,
            max_len,
            d_model,
            store: KvStore::Float(vec![BlockKv::default(); n_blocks]),
        }
    }

    pub fn integer(params: Vec<(QuantParams, QuantParams)>, d_model: usize, max_len: usize) -> Self {
        Self {
            len: 0,
            max_len,
            d_model,
            store: KvStore::Int {
                blocks: vec![BlockKv::default(); params.len()],
                params,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn mode(&self) -> CacheMode {
        match self.store {
            KvStore::Float(_) => CacheMode::Float,
            KvStore::Int { .. } => CacheMode::Integer,
        }
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    /// Drop every cached position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let elems = len * self.d_model;
        match &mut self.store {
            KvStore::Float(b) => b.iter_mut().for_each(|b| b.truncate(elems)),
            KvStore::Int { blocks, .. } => blocks.iter_mut().for_each(|b| b.truncate(elems)),
        }
        self.len = len;
    }

    pub(crate) fn reserve(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.max_len {
            return Err(Error::ContextOverflow {
                len: self.len + extra,
                max: self.max_len,
            });
        }
        Ok(())
    }

    pub(crate) fn set_len(&mut self, len: usize) {
        self.len = len;
    }

    pub(crate) fn float_blocks(&mut self) -> Result<&mut [BlockKv<f32>]> {
        match &mut self.store {
            KvStore::Float(b) => Ok(b),
            KvStore::Int { .. } => Err(Error::Invalid("integer cache passed to the float path".into())),
        }
    }

    pub(crate) fn int_blocks(&mut self) -> Result<&mut [BlockKv<i32>]> {
        match &mut self.store {
            KvStore::Int { blocks, .. } => Ok(blocks),
            KvStore::Float(_) => Err(Error::Invalid("float cache passed to the integer path".into())),
        }
    }
}

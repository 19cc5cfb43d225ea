use crate::error::{Error, Result};
use crate::quant::dequantize;

use super::cache::KVCache;
use super::config::ModelConfig;
use super::forward::{argmax, OpCounts, Trace};
use super::int::IntModel;
use super::weights::Model;

/// Logit rows from either execution path.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    /// `[positions.len(), vocab]`, dequantized on the integer path.
    pub values: Vec<f32>,
    pub vocab: usize,
    pub positions: Vec<usize>,
    /// Greedy choice per row, taken on the native representation.
    pub best: Vec<u32>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Common surface of the float and integer models used by decoding and
/// evaluation.
pub trait LanguageModel: Sync {
    fn config(&self) -> &ModelConfig;

    fn new_cache(&self) -> KVCache;

    /// Logits for `tokens` appended after the cached context (or a fresh one).
    fn logits(&self, tokens: &[u32], cache: Option<&mut KVCache>, ops: &mut OpCounts) -> Result<Logits>;
}

impl LanguageModel for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn new_cache(&self) -> KVCache {
        self.new_float_cache()
    }

    fn logits(&self, tokens: &[u32], cache: Option<&mut KVCache>, ops: &mut OpCounts) -> Result<Logits> {
        let mut trace = Trace::default();
        let out = self.forward_traced(tokens, cache, &mut trace)?;
        ops.add(&trace.ops);
        let best = (0..out.rows()).map(|i| argmax(out.row(i)) as u32).collect();
        Ok(Logits {
            values: out.logits,
            vocab: out.vocab,
            positions: out.positions,
            best,
        })
    }
}

impl LanguageModel for IntModel {
    fn config(&self) -> &ModelConfig {
        IntModel::config(self)
    }

    fn new_cache(&self) -> KVCache {
        IntModel::new_cache(self)
    }

    fn logits(&self, tokens: &[u32], cache: Option<&mut KVCache>, ops: &mut OpCounts) -> Result<Logits> {
        let out = self.forward_traced(tokens, cache, ops)?;
        let vocab = self.config().vocab_size;
        let best = out.logits.data().chunks_exact(vocab).map(|r| argmax(r) as u32).collect();
        Ok(Logits {
            values: dequantize(&out.logits),
            vocab,
            positions: out.positions,
            best,
        })
    }
}

/// Greedy continuation of `prompt` by `n_steps` tokens.
///
/// With `cache`, each step feeds only the newest token; without, each step
/// re-runs the whole context.
pub fn decode_greedy<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[u32],
    n_steps: usize,
    cache: Option<&mut KVCache>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Empty("greedy decoding needs a non-empty prompt"));
    }
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    let max = model.config().max_seq_len;
    // the last generated token is never fed back
    if prompt.len() + n_steps - 1 > max {
        return Err(Error::ContextOverflow {
            len: prompt.len() + n_steps - 1,
            max,
        });
    }
    let mut ops = OpCounts::default();
    let mut out = Vec::with_capacity(n_steps);
    match cache {
        Some(cache) => {
            let mut feed = prompt.to_vec();
            for _ in 0..n_steps {
                let l = model.logits(&feed, Some(cache), &mut ops)?;
                let next = *l.best.last().ok_or(Error::Empty("no logits produced"))?;
                out.push(next);
                feed = vec![next];
            }
        }
        None => {
            let mut ctx = prompt.to_vec();
            for _ in 0..n_steps {
                let l = model.logits(&ctx, None, &mut ops)?;
                let next = *l.best.last().ok_or(Error::Empty("no logits produced"))?;
                out.push(next);
                ctx.push(next);
            }
        }
    }
    Ok(out)
}

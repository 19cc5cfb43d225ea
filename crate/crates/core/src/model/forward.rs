use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::gelu_f64;

use super::cache::{BlockKv, KVCache};
use super::weights::{Block, LayerNormParams, Linear, Model, TokenDrop};

pub const LN_EPS: f64 = 1e-5;

/// Activation sites observed during calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Embed,
    Ln1(usize),
    Q(usize),
    K(usize),
    V(usize),
    /// `q.k / sqrt(d_head)` over the causal window.
    Scores(usize),
    Ctx(usize),
    AttnOut(usize),
    Resid1(usize),
    Ln2(usize),
    FfPre(usize),
    FfAct(usize),
    FfOut(usize),
    Resid2(usize),
    LnF,
    Logits,
}

pub trait Observer {
    fn observe(&mut self, site: Site, values: &[f32]);
}

/// Work done by one forward call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Multiply-accumulates in dense layers (projections, MLP, output head).
    pub linear_macs: u64,
    /// Multiply-accumulates in `q.k` and `p.v`.
    pub attention_macs: u64,
    /// Row-level kernel invocations (one per row per kernel).
    pub kernel_calls: u64,
}

impl OpCounts {
    pub fn total_macs(&self) -> u64 {
        self.linear_macs + self.attention_macs
    }

    pub fn add(&mut self, other: &OpCounts) {
        self.linear_macs += other.linear_macs;
        self.attention_macs += other.attention_macs;
        self.kernel_calls += other.kernel_calls;
    }
}

#[derive(Default)]
pub struct Trace<'a> {
    pub ops: OpCounts,
    pub observer: Option<&'a mut dyn Observer>,
}

impl Trace<'_> {
    #[inline]
    fn observe(&mut self, site: Site, values: &[f32]) {
        if let Some(o) = self.observer.as_deref_mut() {
            o.observe(site, values);
        }
    }
}

/// Logits for the rows a forward call produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[positions.len(), vocab]`
    pub logits: Vec<f32>,
    /// Absolute position of each logit row (all new positions unless tokens
    /// were dropped).
    pub positions: Vec<usize>,
    pub vocab: usize,
}

impl ForwardOutput {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Rows retained by token drop, in position order: the last row always, then
/// the highest attention-received scores (earlier rows win ties).
pub(crate) fn select_kept<S: PartialOrd + Copy>(scores: &[S], drop: &TokenDrop) -> Vec<usize> {
    let t = scores.len();
    let keep = drop.kept(t);
    if keep >= t {
        return (0..t).collect();
    }
    let mut order: Vec<usize> = (0..t - 1).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep - 1).collect();
    kept.push(t - 1);
    kept.sort_unstable();
    kept
}

pub(crate) fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::TokenRange { token, vocab }),
        None => Ok(()),
    }
}

// Eight partial sums in a fixed order: vectorizes, and is independent of
// how many rows are processed together.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, ra) = a.split_at(a.len() / 8 * 8);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn linear_row(lin: &Linear, x: &[f32], out: &mut [f32]) {
    for (o, dst) in out.iter_mut().enumerate() {
        let b = lin.bias.as_ref().map_or(0.0, |b| b[o]);
        *dst = dot(lin.row(o), x) + b;
    }
}

pub(crate) fn layernorm_row(p: &LayerNormParams, x: &[f32], out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = ((x[i] as f64 - mean) * inv) as f32 * p.gamma[i] + p.beta[i];
    }
}

/// Float attention of one query row over every cached row of `kv`.
/// Adds per-key probability mass (summed over heads) to `received` if given.
fn attend_row(
    q: &[f32],
    kv: &BlockKv<f32>,
    n_heads: usize,
    out: &mut [f32],
    scores: &mut Vec<f32>,
    received: Option<&mut [f64]>,
    observed: Option<&mut Vec<f32>>,
) {
    let d = q.len();
    let dh = d / n_heads;
    let n = kv.k.len() / d;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut received = received;
    let mut observed = observed;
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        scores.clear();
        scores.extend((0..n).map(|j| dot(&q[cols.clone()], &kv.k[j * d + cols.start..j * d + cols.end]) * scale));
        if let Some(obs) = observed.as_deref_mut() {
            obs.extend_from_slice(scores);
        }
        let max = scores.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s));
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        scores.iter_mut().for_each(|s| *s *= inv);
        if let Some(r) = received.as_deref_mut() {
            for (dst, &p) in r.iter_mut().zip(scores.iter()) {
                *dst += p as f64;
            }
        }
        let o = &mut out[cols.clone()];
        o.fill(0.0);
        for (j, &p) in scores.iter().enumerate() {
            let vrow = &kv.v[j * d + cols.start..j * d + cols.end];
            for (dst, &v) in o.iter_mut().zip(vrow) {
                *dst += p * v;
            }
        }
    }
}

struct Scratch {
    h: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    ctx: Vec<f32>,
    a: Vec<f32>,
    f: Vec<f32>,
    g: Vec<f32>,
    scores: Vec<f32>,
    observed: Vec<f32>,
}

impl Scratch {
    fn new(d: usize, ff: usize) -> Self {
        Self {
            h: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            ctx: vec![0.0; d],
            a: vec![0.0; d],
            f: vec![0.0; ff],
            g: vec![0.0; ff],
            scores: Vec::new(),
            observed: Vec::new(),
        }
    }
}

impl Model {
    /// Float logits for every position of `tokens` (fresh context).
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        self.forward_traced(tokens, None, &mut Trace::default())
    }

    /// Float forward of `tokens` appended after whatever `cache` holds.
    ///
    /// Without a cache the call runs on a temporary one, so cached and
    /// uncached runs execute the same arithmetic row by row.
    pub fn forward_traced(&self, tokens: &[u32], cache: Option<&mut KVCache>, trace: &mut Trace) -> Result<ForwardOutput> {
        check_tokens(tokens, self.config.vocab_size)?;
        if cache.is_some() && self.token_drop.is_some() {
            return Err(Error::Invalid(
                "token drop re-ranks the whole context and cannot run on a KV cache".into(),
            ));
        }
        let mut local;
        let cache = match cache {
            Some(c) => c,
            None => {
                local = self.new_float_cache();
                &mut local
            }
        };
        cache.reserve(tokens.len())?;
        let d = self.config.d_model;
        let start = cache.len();
        let mut positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut xs: Vec<Vec<f32>> = tokens
            .iter()
            .zip(&positions)
            .map(|(&t, &p)| {
                let tok = &self.embed.tokens[t as usize * d..(t as usize + 1) * d];
                let pos = &self.embed.positions[p * d..(p + 1) * d];
                tok.iter().zip(pos).map(|(a, b)| a + b).collect()
            })
            .collect();
        for x in &xs {
            trace.observe(Site::Embed, x);
        }
        let kvs = cache.float_blocks()?;
        for (bi, (block, kv)) in self.blocks.iter().zip(kvs.iter_mut()).enumerate() {
            let drop_here = self.token_drop.filter(|td| td.after_block == bi);
            let mut received = drop_here.map(|_| vec![0.0f64; xs.len()]);
            self.block_forward(bi, block, kv, &mut xs, received.as_deref_mut(), trace);
            if let (Some(td), Some(r)) = (drop_here, received) {
                let kept = select_kept(&r, &td);
                xs = kept.iter().map(|&i| std::mem::take(&mut xs[i])).collect();
                positions = kept.iter().map(|&i| positions[i]).collect();
            }
        }
        cache.set_len(start + tokens.len());

        let v = self.config.vocab_size;
        let mut logits = vec![0.0f32; xs.len() * v];
        let mut h = vec![0.0f32; d];
        for (x, out) in xs.iter().zip(logits.chunks_exact_mut(v)) {
            layernorm_row(&self.head.ln, x, &mut h);
            trace.observe(Site::LnF, &h);
            linear_row(&self.head.out, &h, out);
            trace.observe(Site::Logits, out);
            trace.ops.linear_macs += (d * v) as u64;
            trace.ops.kernel_calls += 2;
        }
        Ok(ForwardOutput { logits, positions, vocab: v })
    }

    fn block_forward(
        &self,
        bi: usize,
        b: &Block,
        kv: &mut BlockKv<f32>,
        xs: &mut [Vec<f32>],
        mut received: Option<&mut [f64]>,
        trace: &mut Trace,
    ) {
        let d = self.config.d_model;
        let ff = b.ff_width();
        let observing = trace.observer.is_some();
        let mut s = Scratch::new(d, ff);
        for x in xs.iter_mut() {
            layernorm_row(&b.ln1, x, &mut s.h);
            linear_row(&b.wq, &s.h, &mut s.q);
            linear_row(&b.wk, &s.h, &mut s.k);
            linear_row(&b.wv, &s.h, &mut s.v);
            kv.k.extend_from_slice(&s.k);
            kv.v.extend_from_slice(&s.v);
            let n_keys = kv.k.len() / d;
            s.observed.clear();
            attend_row(
                &s.q,
                kv,
                self.config.n_heads,
                &mut s.ctx,
                &mut s.scores,
                received.as_deref_mut(),
                observing.then_some(&mut s.observed),
            );
            linear_row(&b.wo, &s.ctx, &mut s.a);
            for (xi, ai) in x.iter_mut().zip(&s.a) {
                *xi += ai;
            }
            if observing {
                trace.observe(Site::Ln1(bi), &s.h);
                trace.observe(Site::Q(bi), &s.q);
                trace.observe(Site::K(bi), &s.k);
                trace.observe(Site::V(bi), &s.v);
                trace.observe(Site::Scores(bi), &s.observed);
                trace.observe(Site::Ctx(bi), &s.ctx);
                trace.observe(Site::AttnOut(bi), &s.a);
                trace.observe(Site::Resid1(bi), x);
            }
            layernorm_row(&b.ln2, x, &mut s.h);
            linear_row(&b.fc1, &s.h, &mut s.f);
            for (g, &f) in s.g.iter_mut().zip(&s.f) {
                *g = gelu_f64(f as f64) as f32;
            }
            linear_row(&b.fc2, &s.g, &mut s.a);
            for (xi, ai) in x.iter_mut().zip(&s.a) {
                *xi += ai;
            }
            if observing {
                trace.observe(Site::Ln2(bi), &s.h);
                trace.observe(Site::FfPre(bi), &s.f);
                trace.observe(Site::FfAct(bi), &s.g);
                trace.observe(Site::FfOut(bi), &s.a);
                trace.observe(Site::Resid2(bi), x);
            }
            trace.ops.linear_macs += (4 * d * d + 2 * d * ff) as u64;
            trace.ops.attention_macs += (2 * d * n_keys) as u64;
            // ln1, q, k, v, attention, o, add, ln2, fc1, gelu, fc2, add
            trace.ops.kernel_calls += 12;
        }
    }

    pub fn new_float_cache(&self) -> KVCache {
        KVCache::float(self.blocks.len(), self.config.d_model, self.config.max_seq_len)
    }
}

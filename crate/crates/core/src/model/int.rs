//! Integer-only execution of a calibrated model.
//!
//! Weights are quantized symmetric per output channel at the bit-width the
//! assignment gives their block; activations are 8-bit, attention scores,
//! probabilities and logits 16-bit. Every stage ends in a requantization.

use crate::error::{Error, Result};
use crate::kernels::{
    probability_params, AddPlan, Approx, AttentionConfig, PreparedAttention, PreparedGelu, PreparedLayerNorm,
    PreparedMatmul,
};
use crate::quant::{compute_qparams, quantize, BitWidth, Granularity, IntTensor, QuantParams, RequantMultiplier};

use super::assignment::PrecisionAssignment;
use super::cache::KVCache;
use super::calibration::Calibration;
use super::config::{BlockId, ModelConfig};
use super::forward::{check_tokens, select_kept, OpCounts, Site};
use super::weights::{LayerNormParams, Linear, Model, TokenDrop};

/// Activation precision of the integer path.
pub const ACT_BITS: BitWidth = BitWidth::B8;
/// Precision of attention scores, probabilities and logits.
pub const WIDE_BITS: BitWidth = BitWidth::B16;
/// LayerNorm gamma stays at baseline precision.
pub const VECTOR_BITS: BitWidth = BitWidth::B16;

fn symmetric(cal: &Calibration, site: Site, bits: BitWidth) -> Result<QuantParams> {
    let (lo, hi) = cal.range(site)?;
    QuantParams::from_range(lo as f64, hi as f64, bits, true)
}

fn asymmetric(cal: &Calibration, site: Site, bits: BitWidth) -> Result<QuantParams> {
    let (lo, hi) = cal.range(site)?;
    QuantParams::from_range(lo as f64, hi as f64, bits, false)
}

/// Per-row symmetric quantization of a `[rows, cols]` table.
fn quantize_rows(values: &[f32], rows: usize, bits: BitWidth) -> Result<IntTensor> {
    let cols = values.len() / rows;
    let params = compute_qparams(values, &[rows, cols], bits, true, Granularity::PerOutputChannel)?;
    quantize(values, &[rows, cols], &params)
}

fn prepare_linear(
    site: &str,
    lin: &Linear,
    bits: BitWidth,
    input: &QuantParams,
    output: &QuantParams,
) -> Result<PreparedMatmul> {
    let w = quantize_rows(&lin.weight, lin.out_features, bits)?;
    let bias = lin
        .bias
        .as_ref()
        .map(|b| {
            b.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let q = (v as f64 / (input.scale * w.channel_params(c).scale)).round();
                    if q.abs() > i32::MAX as f64 / 2.0 {
                        Err(Error::AccumulatorOverflow {
                            site: format!("{site} bias"),
                            worst: q.abs() as u128,
                        })
                    } else {
                        Ok(q as i32)
                    }
                })
                .collect::<Result<Vec<i32>>>()
        })
        .transpose()?;
    PreparedMatmul::new(site, &w, bias, input, output)
}

fn prepare_ln(p: &LayerNormParams, input: &QuantParams, output: &QuantParams) -> Result<PreparedLayerNorm> {
    PreparedLayerNorm::new(input, &p.gamma, &p.beta, VECTOR_BITS, output, Approx::default())
}

#[derive(Clone, Debug)]
struct IntEmbedding {
    d: usize,
    tokens: Vec<i32>,
    token_mul: Vec<RequantMultiplier>,
    positions: Vec<i32>,
    position_mul: Vec<RequantMultiplier>,
    output: QuantParams,
}

impl IntEmbedding {
    fn row(&self, token: usize, pos: usize, out: &mut Vec<i32>) {
        let plan = AddPlan::from_multipliers(0, self.token_mul[token], 0, self.position_mul[pos], &self.output);
        let t = &self.tokens[token * self.d..(token + 1) * self.d];
        let p = &self.positions[pos * self.d..(pos + 1) * self.d];
        out.clear();
        out.extend(t.iter().zip(p).map(|(&a, &b)| plan.apply(a, b)));
    }
}

#[derive(Clone, Debug)]
struct IntBlock {
    ln1: PreparedLayerNorm,
    wq: PreparedMatmul,
    wk: PreparedMatmul,
    wv: PreparedMatmul,
    attn: PreparedAttention,
    wo: PreparedMatmul,
    add1: AddPlan,
    ln2: PreparedLayerNorm,
    fc1: PreparedMatmul,
    gelu: PreparedGelu,
    fc2: PreparedMatmul,
    add2: AddPlan,
    kv_params: (QuantParams, QuantParams),
}

/// Integer logits for the rows a forward call produced.
#[derive(Clone, Debug)]
pub struct IntForwardOutput {
    /// `[positions.len(), vocab]`, 16-bit codes.
    pub logits: IntTensor,
    pub positions: Vec<usize>,
}

/// A model lowered to integer kernels under one precision assignment.
#[derive(Clone, Debug)]
pub struct IntModel {
    config: ModelConfig,
    assignment: PrecisionAssignment,
    token_drop: Option<TokenDrop>,
    embed: IntEmbedding,
    blocks: Vec<IntBlock>,
    ln_f: PreparedLayerNorm,
    out: PreparedMatmul,
}

impl IntModel {
    pub fn build(model: &Model, assignment: &PrecisionAssignment, cal: &Calibration) -> Result<Self> {
        assignment.validate(&model.config)?;
        cal.check_model(model)?;
        let cfg = &model.config;
        let d = cfg.d_model;

        let emb_bits = assignment.get(BlockId::Embedding)?;
        let embed_q = symmetric(cal, Site::Embed, ACT_BITS)?;
        let tokens = quantize_rows(&model.embed.tokens, cfg.vocab_size, emb_bits)?;
        let positions = quantize_rows(&model.embed.positions, cfg.max_seq_len, emb_bits)?;
        let muls = |t: &IntTensor| -> Result<Vec<RequantMultiplier>> {
            t.params()
                .iter()
                .map(|q| RequantMultiplier::from_real(q.scale / embed_q.scale))
                .collect()
        };
        let embed = IntEmbedding {
            d,
            token_mul: muls(&tokens)?,
            position_mul: muls(&positions)?,
            tokens: tokens.into_data(),
            positions: positions.into_data(),
            output: embed_q,
        };

        let mut resid = embed_q;
        let mut blocks = Vec::with_capacity(model.blocks.len());
        for (i, b) in model.blocks.iter().enumerate() {
            let bits = assignment.get(BlockId::Transformer(i))?;
            let q = |s: Site| symmetric(cal, s, ACT_BITS);
            let (ln1_q, q_q, k_q, v_q) = (q(Site::Ln1(i))?, q(Site::Q(i))?, q(Site::K(i))?, q(Site::V(i))?);
            let (ctx_q, attn_q, r1_q) = (q(Site::Ctx(i))?, q(Site::AttnOut(i))?, q(Site::Resid1(i))?);
            let (ln2_q, act_q, ffo_q, r2_q) = (q(Site::Ln2(i))?, q(Site::FfAct(i))?, q(Site::FfOut(i))?, q(Site::Resid2(i))?);
            let pre_q = asymmetric(cal, Site::FfPre(i), ACT_BITS)?;
            let attn_cfg = AttentionConfig {
                n_heads: cfg.n_heads,
                causal: true,
                scores: symmetric(cal, Site::Scores(i), WIDE_BITS)?,
                probs: probability_params(WIDE_BITS),
                output: ctx_q,
                approx: Approx::default(),
            };
            blocks.push(IntBlock {
                ln1: prepare_ln(&b.ln1, &resid, &ln1_q)?,
                wq: prepare_linear("attn.wq", &b.wq, bits, &ln1_q, &q_q)?,
                wk: prepare_linear("attn.wk", &b.wk, bits, &ln1_q, &k_q)?,
                wv: prepare_linear("attn.wv", &b.wv, bits, &ln1_q, &v_q)?,
                attn: PreparedAttention::new(&q_q, &k_q, &v_q, d, cfg.max_seq_len, &attn_cfg)?,
                wo: prepare_linear("attn.wo", &b.wo, bits, &ctx_q, &attn_q)?,
                add1: AddPlan::new(&resid, &attn_q, &r1_q)?,
                ln2: prepare_ln(&b.ln2, &r1_q, &ln2_q)?,
                fc1: prepare_linear("mlp.fc1", &b.fc1, bits, &ln2_q, &pre_q)?,
                gelu: PreparedGelu::new(&pre_q, &act_q, Approx::default())?,
                fc2: prepare_linear("mlp.fc2", &b.fc2, bits, &act_q, &ffo_q)?,
                add2: AddPlan::new(&r1_q, &ffo_q, &r2_q)?,
                kv_params: (k_q, v_q),
            });
            resid = r2_q;
        }

        let head_bits = assignment.get(BlockId::OutputHead)?;
        let lnf_q = symmetric(cal, Site::LnF, ACT_BITS)?;
        let logits_q = symmetric(cal, Site::Logits, WIDE_BITS)?;
        Ok(Self {
            config: cfg.clone(),
            assignment: assignment.clone(),
            token_drop: model.token_drop,
            embed,
            blocks,
            ln_f: prepare_ln(&model.head.ln, &resid, &lnf_q)?,
            out: prepare_linear("head.out", &model.head.out, head_bits, &lnf_q, &logits_q)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn assignment(&self) -> &PrecisionAssignment {
        &self.assignment
    }

    pub fn token_drop(&self) -> Option<TokenDrop> {
        self.token_drop
    }

    pub fn logits_params(&self) -> &QuantParams {
        self.out.output()
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::integer(
            self.blocks.iter().map(|b| b.kv_params).collect(),
            self.config.d_model,
            self.config.max_seq_len,
        )
    }

    /// Integer logits for every position of `tokens` (fresh context).
    pub fn forward(&self, tokens: &[u32]) -> Result<IntForwardOutput> {
        self.forward_traced(tokens, None, &mut OpCounts::default())
    }

    /// Integer forward of `tokens` appended after whatever `cache` holds.
    pub fn forward_traced(
        &self,
        tokens: &[u32],
        cache: Option<&mut KVCache>,
        ops: &mut OpCounts,
    ) -> Result<IntForwardOutput> {
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
                local = self.new_cache();
                &mut local
            }
        };
        cache.reserve(tokens.len())?;
        let d = self.config.d_model;
        let start = cache.len();
        let mut positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut xs: Vec<Vec<i32>> = tokens
            .iter()
            .zip(&positions)
            .map(|(&t, &p)| {
                let mut row = Vec::with_capacity(d);
                self.embed.row(t as usize, p, &mut row);
                row
            })
            .collect();
        let kvs = cache.int_blocks()?;
        let mut h = vec![0i32; d];
        let mut ctx = vec![0i32; d];
        for (bi, (b, kv)) in self.blocks.iter().zip(kvs.iter_mut()).enumerate() {
            let drop_here = self.token_drop.filter(|td| td.after_block == bi);
            let mut received = drop_here.map(|_| vec![0i64; xs.len()]);
            let ff = b.fc1.out_features();
            for x in xs.iter_mut() {
                b.ln1.run_row(x, &mut h);
                let q = b.wq.run(&h);
                kv.k.extend(b.wk.run(&h));
                kv.v.extend(b.wv.run(&h));
                let n_keys = kv.k.len() / d;
                b.attn.attend_row(&q, &kv.k, &kv.v, &mut ctx, received.as_deref_mut());
                let a = b.wo.run(&ctx);
                for (xi, &ai) in x.iter_mut().zip(&a) {
                    *xi = b.add1.apply(*xi, ai);
                }
                b.ln2.run_row(x, &mut h);
                let mut f = b.fc1.run(&h);
                f.iter_mut().for_each(|v| *v = b.gelu.apply(*v));
                let o = b.fc2.run(&f);
                for (xi, &oi) in x.iter_mut().zip(&o) {
                    *xi = b.add2.apply(*xi, oi);
                }
                ops.linear_macs += (4 * d * d + 2 * d * ff) as u64;
                ops.attention_macs += (2 * d * n_keys) as u64;
                ops.kernel_calls += 12;
            }
            if let (Some(td), Some(r)) = (drop_here, received) {
                let kept = select_kept(&r, &td);
                xs = kept.iter().map(|&i| std::mem::take(&mut xs[i])).collect();
                positions = kept.iter().map(|&i| positions[i]).collect();
            }
        }
        cache.set_len(start + tokens.len());

        let v = self.config.vocab_size;
        let mut logits = Vec::with_capacity(xs.len() * v);
        for x in &xs {
            self.ln_f.run_row(x, &mut h);
            logits.extend(self.out.run(&h));
            ops.linear_macs += (d * v) as u64;
            ops.kernel_calls += 2;
        }
        Ok(IntForwardOutput {
            logits: IntTensor::new(vec![xs.len(), v], logits, vec![*self.out.output()])?,
            positions,
        })
    }
}

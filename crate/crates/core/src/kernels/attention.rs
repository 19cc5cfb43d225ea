//! Integer scaled dot-product attention.
//!
//! `q.k` accumulates in 32 bits and is requantized straight into the score
//! format with `1/sqrt(d_head)` folded into the multiplier. Scores go through
//! [`PreparedSoftmax`]; probabilities times values accumulate in 32 bits and
//! are requantized once more.

use crate::error::{Error, Result};
use crate::quant::{IntTensor, QuantParams, RequantMultiplier};

use super::config::AttentionConfig;
use super::matmul::{check_accumulator, dot_i32, max_centered};
use super::softmax::PreparedSoftmax;

#[derive(Clone, Debug)]
pub struct PreparedAttention {
    n_heads: usize,
    d_head: usize,
    causal: bool,
    q_zp: i32,
    k_zp: i32,
    v_zp: i32,
    to_scores: RequantMultiplier,
    scores: QuantParams,
    softmax: PreparedSoftmax,
    to_output: RequantMultiplier,
    probs_zp: i32,
    output: QuantParams,
}

impl PreparedAttention {
    pub fn new(
        q: &QuantParams,
        k: &QuantParams,
        v: &QuantParams,
        d_model: usize,
        max_keys: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if d_model % cfg.n_heads != 0 {
            return Err(Error::Shape(format!("d_model {d_model} not divisible by {} heads", cfg.n_heads)));
        }
        let d_head = d_model / cfg.n_heads;
        check_accumulator("attention scores", d_head, max_centered(q), max_centered(k), 0)?;
        check_accumulator("attention context", max_keys, max_centered(&cfg.probs), max_centered(v), 0)?;
        let to_scores = RequantMultiplier::from_real(q.scale * k.scale / ((d_head as f64).sqrt() * cfg.scores.scale))?;
        Ok(Self {
            n_heads: cfg.n_heads,
            d_head,
            causal: cfg.causal,
            q_zp: q.zero_point,
            k_zp: k.zero_point,
            v_zp: v.zero_point,
            to_scores,
            scores: cfg.scores,
            softmax: PreparedSoftmax::new(&cfg.scores, &cfg.probs, cfg.approx)?,
            to_output: RequantMultiplier::from_real(cfg.probs.scale * v.scale / cfg.output.scale)?,
            probs_zp: cfg.probs.zero_point,
            output: cfg.output,
        })
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    /// Attend one query row over `n_keys` cached key/value rows (`[n_keys, d_model]`).
    ///
    /// `received`, when given, accumulates each key's probability codes
    /// (zero-point removed) summed over heads.
    pub fn attend_row(
        &self,
        q_row: &[i32],
        keys: &[i32],
        values: &[i32],
        out: &mut [i32],
        mut received: Option<&mut [i64]>,
    ) {
        let d_model = self.n_heads * self.d_head;
        let n_keys = keys.len() / d_model;
        let mut scores = vec![0i32; n_keys];
        let mut probs = vec![0i32; n_keys];
        let mut qc = vec![0i32; self.d_head];
        let mut acc = vec![0i32; self.d_head];
        for h in 0..self.n_heads {
            let span = h * self.d_head..(h + 1) * self.d_head;
            for (dst, &src) in qc.iter_mut().zip(&q_row[span.clone()]) {
                *dst = src - self.q_zp;
            }
            // sum (q - zq)(k - zk) = sum (q - zq) k - zk sum (q - zq)
            let q_sum = qc.iter().fold(0i32, |a, &v| a.wrapping_add(v));
            let k_corr = q_sum.wrapping_mul(self.k_zp);
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &keys[j * d_model + span.start..j * d_model + span.end];
                let acc = dot_i32(&qc, krow).wrapping_sub(k_corr) as i64;
                *s = self.scores.bits.clamp(self.to_scores.apply(acc) + self.scores.zero_point as i64);
            }
            self.softmax.run_row(&scores, &mut probs);
            if let Some(r) = received.as_deref_mut() {
                for (dst, &c) in r.iter_mut().zip(&probs) {
                    *dst += (c - self.probs_zp) as i64;
                }
            }
            acc.fill(0);
            let mut p_sum = 0i32;
            for (j, &pc) in probs.iter().enumerate() {
                let p = pc - self.probs_zp;
                if p == 0 {
                    continue;
                }
                p_sum = p_sum.wrapping_add(p);
                let vrow = &values[j * d_model + span.start..j * d_model + span.end];
                for (a, &v) in acc.iter_mut().zip(vrow) {
                    *a = a.wrapping_add(p.wrapping_mul(v));
                }
            }
            let v_corr = p_sum.wrapping_mul(self.v_zp);
            for (o, &a) in out[span.clone()].iter_mut().zip(&acc) {
                let a = a.wrapping_sub(v_corr) as i64;
                *o = self.output.bits.clamp(self.to_output.apply(a) + self.output.zero_point as i64);
            }
        }
    }
}

/// Multi-head attention over `[seq, d_model]` query/key/value tensors.
pub fn int_attention(q: &IntTensor, k: &IntTensor, v: &IntTensor, cfg: &AttentionConfig) -> Result<IntTensor> {
    let [seq, d_model] = *q.shape() else {
        return Err(Error::Shape(format!("query must be [seq, d_model], got {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?} disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let plan = PreparedAttention::new(q.qparams(), k.qparams(), v.qparams(), d_model, seq, cfg)?;
    let mut out = vec![0; seq * d_model];
    for i in 0..seq {
        let n_keys = if cfg.causal { i + 1 } else { seq };
        plan.attend_row(
            &q.data()[i * d_model..(i + 1) * d_model],
            &k.data()[..n_keys * d_model],
            &v.data()[..n_keys * d_model],
            &mut out[i * d_model..(i + 1) * d_model],
            None,
        );
    }
    Ok(IntTensor::from_parts(vec![seq, d_model], out, vec![cfg.output]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::config::Approx;
    use crate::kernels::softmax::probability_params;
    use crate::quant::{dequantize, quantize, BitWidth};
    use rand::{Rng, SeedableRng};

    fn cfg(n_heads: usize, out: QuantParams) -> AttentionConfig {
        AttentionConfig {
            n_heads,
            causal: true,
            scores: QuantParams::symmetric(16.0 / 32767.0, BitWidth::B16).unwrap(),
            probs: probability_params(BitWidth::B16),
            output: out,
            approx: Approx::default(),
        }
    }

    fn float_attention(q: &[f32], k: &[f32], v: &[f32], seq: usize, d: usize, heads: usize) -> Vec<f64> {
        let dh = d / heads;
        let mut out = vec![0.0; seq * d];
        for h in 0..heads {
            for i in 0..seq {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh).map(|t| q[i * d + h * dh + t] as f64 * k[j * d + h * dh + t] as f64).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..dh {
                    out[i * d + h * dh + t] = (0..=i).map(|j| e[j] / z * v[j * d + h * dh + t] as f64).sum();
                }
            }
        }
        out
    }

    #[test]
    fn single_position_returns_value_row() {
        let qp = QuantParams::symmetric(0.02, BitWidth::B8).unwrap();
        let q = IntTensor::new(vec![1, 4], vec![10, -3, 7, 100], vec![qp]).unwrap();
        let v = IntTensor::new(vec![1, 4], vec![5, -6, 127, -128], vec![qp]).unwrap();
        let out = int_attention(&q, &q, &v, &cfg(2, qp)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let qp = QuantParams::symmetric(0.02, BitWidth::B8).unwrap();
        let seq = 4;
        let q = IntTensor::new(vec![seq, 2], vec![9; seq * 2], vec![qp]).unwrap();
        let v = IntTensor::new(vec![seq, 2], vec![0, 40, 20, 0, 40, 0, 60, 0], vec![qp]).unwrap();
        let out = int_attention(&q, &q, &v, &cfg(1, qp)).unwrap();
        // row 3 sees all four values: mean of (0, 20, 40, 60) = 30, mean of (40, 0, 0, 0) = 10
        assert_eq!(&out.data()[6..8], &[30, 10]);
        assert_eq!(&out.data()[2..4], &[10, 20]);
    }

    #[test]
    fn random_heads_match_float_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (seq, heads, dh) = (16, 4, 8);
        let d = heads * dh;
        let qp = QuantParams::symmetric(2.0 / 127.0, BitWidth::B8).unwrap();
        let outq = QuantParams::symmetric(2.0 / 127.0, BitWidth::B8).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let mut gen = || (0..seq * d).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
            let (qf, kf, vf) = (gen(), gen(), gen());
            let q = quantize(&qf, &[seq, d], &[qp]).unwrap();
            let k = quantize(&kf, &[seq, d], &[qp]).unwrap();
            let v = quantize(&vf, &[seq, d], &[qp]).unwrap();
            let got = dequantize(&int_attention(&q, &k, &v, &cfg(heads, outq)).unwrap());
            let want = float_attention(&dequantize(&q), &dequantize(&k), &dequantize(&v), seq, d, heads);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((*g as f64 - w).abs());
            }
        }
        assert!(worst <= 0.03, "worst {worst}");
    }

    #[test]
    fn mismatched_shapes() {
        let qp = QuantParams::symmetric(0.02, BitWidth::B8).unwrap();
        let q = IntTensor::new(vec![2, 4], vec![0; 8], vec![qp]).unwrap();
        let k = IntTensor::new(vec![1, 4], vec![0; 4], vec![qp]).unwrap();
        assert!(int_attention(&q, &k, &k, &cfg(2, qp)).is_err());
    }
}

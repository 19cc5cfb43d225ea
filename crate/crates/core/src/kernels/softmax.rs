//! Integer softmax.
//!
//! `exp(x - max)` is evaluated as `2^-(q + r)`: the integer part `q` becomes a
//! right shift and `2^-r` on `r in [0, 1)` is a second-order polynomial in
//! Q30. Normalization is one integer division per element.

use crate::error::{Error, Result};
use crate::quant::{div_round, round_shift_i64, IntTensor, QuantParams, RequantMultiplier};

use super::config::{Approx, KernelConfig};

const ONE_Q30: i64 = 1 << 30;
/// Quadratic coefficient of `2^-r ~ 1 + a r + b r^2`, minimax on `[0, 1)`
/// subject to `p(0) = 1` and `p(1) = 1/2` (so `a = -1/2 - b`).
const POLY_B: f64 = 0.16988;

#[derive(Clone, Debug)]
pub struct PreparedSoftmax {
    to_exponent: RequantMultiplier,
    frac_bits: u32,
    poly_a: i64,
    poly_b: i64,
    to_output: RequantMultiplier,
    output: QuantParams,
}

impl PreparedSoftmax {
    pub fn new(input: &QuantParams, output: &QuantParams, approx: Approx) -> Result<Self> {
        output.validate()?;
        let frac_bits = approx.exp_frac_bits.min(30);
        let to_exponent =
            RequantMultiplier::from_real(input.scale * std::f64::consts::LOG2_E * (1u64 << frac_bits) as f64)?;
        let poly_b = (POLY_B * ONE_Q30 as f64).round() as i64;
        let poly_a = -(ONE_Q30 / 2) - poly_b;
        let to_output = RequantMultiplier::from_real((-30f64).exp2() / output.scale)?;
        Ok(Self {
            to_exponent,
            frac_bits,
            poly_a,
            poly_b,
            to_output,
            output: *output,
        })
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    /// `2^-(t / 2^frac_bits)` in Q30 for `t >= 0`, before the shift by the integer part.
    #[inline]
    fn pow2_neg(&self, t: i64) -> (i64, i64) {
        let q = t >> self.frac_bits;
        let r = (t & ((1 << self.frac_bits) - 1)) << (30 - self.frac_bits);
        let r2 = round_shift_i64(r * r, 30);
        let p = ONE_Q30 + round_shift_i64(self.poly_a * r, 30) + round_shift_i64(self.poly_b * r2, 30);
        (p, q)
    }

    /// Softmax over one row of codes, writing output codes into `out`.
    pub fn run_row(&self, codes: &[i32], out: &mut [i32]) {
        debug_assert_eq!(codes.len(), out.len());
        let Some(&max) = codes.iter().max() else {
            return;
        };
        // Accumulation precision: n * 2^acc_bits stays within 2^30.
        let acc_bits = 30 - (usize::BITS - codes.len().leading_zeros()).min(30);
        let mut sum: i64 = 0;
        for (o, &c) in out.iter_mut().zip(codes) {
            let t = self.to_exponent.apply((max - c) as i64);
            let (p, q) = self.pow2_neg(t);
            let shift = q + 30 - acc_bits as i64;
            let e = if shift >= 63 { 0 } else { p >> shift };
            *o = e as i32;
            sum += e;
        }
        for o in out.iter_mut() {
            let p30 = div_round((*o as i64) << 30, sum);
            *o = self.output.bits.clamp(self.to_output.apply(p30) + self.output.zero_point as i64);
        }
    }
}

/// Row-wise softmax over the last axis.
pub fn int_softmax(logits: &IntTensor, cfg: &KernelConfig) -> Result<IntTensor> {
    let cols = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
    let plan = PreparedSoftmax::new(logits.qparams(), &cfg.output, cfg.approx)?;
    let mut out = vec![0; logits.len()];
    if cols > 0 {
        for (row, o) in logits.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            plan.run_row(row, o);
        }
    }
    Ok(IntTensor::from_parts(logits.shape().to_vec(), out, vec![cfg.output]))
}

/// Quantizer for probabilities in `[0, 1]` using the full signed code range.
pub fn probability_params(bits: crate::quant::BitWidth) -> QuantParams {
    let levels = (bits.qmax() - bits.qmin()) as f64;
    QuantParams::new(1.0 / levels, bits.qmin(), bits, false).expect("probability quantizer is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, BitWidth};
    use rand::{Rng, SeedableRng};

    fn float_softmax(x: &[f32]) -> Vec<f64> {
        let m = x.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = x.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn uniform_row() {
        let inq = QuantParams::symmetric(0.05, BitWidth::B8).unwrap();
        let t = IntTensor::new(vec![1, 4], vec![17; 4], vec![inq]).unwrap();
        let out = int_softmax(&t, &KernelConfig::new(probability_params(BitWidth::B16)).unwrap()).unwrap();
        let p = dequantize(&out);
        assert!(p.iter().all(|&v| v == p[0]));
        assert!((p[0] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn saturated_winner() {
        let inq = QuantParams::symmetric(0.5, BitWidth::B8).unwrap();
        let t = IntTensor::new(vec![1, 4], vec![127, -128, -100, -128], vec![inq]).unwrap();
        let out = int_softmax(&t, &KernelConfig::new(probability_params(BitWidth::B8)).unwrap()).unwrap();
        let p = dequantize(&out);
        assert!((p[0] - 1.0).abs() < 1e-6);
        assert!(p[1..].iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn random_rows_match_float_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let inq = QuantParams::symmetric(8.0 / 127.0, BitWidth::B8).unwrap();
        for out_bits in [BitWidth::B8, BitWidth::B16] {
            let cfg = KernelConfig::new(probability_params(out_bits)).unwrap();
            let mut worst = 0.0f64;
            for _ in 0..1000 {
                let codes: Vec<i32> = (0..16).map(|_| rng.random_range(-128..=127)).collect();
                let t = IntTensor::new(vec![1, 16], codes, vec![inq]).unwrap();
                let got = dequantize(&int_softmax(&t, &cfg).unwrap());
                let want = float_softmax(&dequantize(&t));
                for (g, w) in got.iter().zip(&want) {
                    worst = worst.max((*g as f64 - w).abs());
                }
                assert!(got.iter().all(|&v| v >= 0.0));
                assert_eq!(argmax(&got), argmax(&want));
            }
            assert!(worst <= 0.01, "{out_bits}-bit worst {worst}");
        }
    }

    #[test]
    fn exponent_polynomial_is_monotone() {
        let inq = QuantParams::symmetric(0.01, BitWidth::B16).unwrap();
        let plan = PreparedSoftmax::new(&inq, &probability_params(BitWidth::B16), Approx::default()).unwrap();
        let mut prev = i64::MAX;
        for t in 0..(1i64 << 16) {
            let (p, q) = plan.pow2_neg(t);
            assert_eq!(q, 0);
            assert!(p <= prev && p >= ONE_Q30 / 2);
            prev = p;
        }
    }
}

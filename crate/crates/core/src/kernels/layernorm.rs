//! Integer LayerNorm over the last axis.
//!
//! Sum and sum of squares accumulate in 32 bits; deviations and the variance
//! are kept scaled by the row length so no rounding happens before the
//! square root, which comes from an integer Newton iteration seeded by a
//! bit scan.

use crate::error::{Error, Result};
use crate::quant::{div_round, IntTensor, QuantParams, RequantMultiplier};

use super::config::Approx;

/// Fractional bits of the normalized value before the affine step.
const Z_FRAC: u32 = 12;

/// Integer square root: bit-scan seed, then `steps` Newton iterations.
///
/// The seed is the Newton update taken from the power of two nearest the
/// root, which is already within about 6%; two further steps bring the
/// relative error under 1e-5.
pub fn isqrt_newton(v: u64, steps: u32) -> u64 {
    if v < 2 {
        return v;
    }
    let h = (64 - v.leading_zeros()) / 2;
    let base = 1u64 << h;
    let mut x = (base + (v >> h)) / 2;
    for _ in 0..steps {
        if x == 0 {
            break;
        }
        x = (x + v / x) / 2;
    }
    x
}

#[derive(Clone, Debug)]
pub struct PreparedLayerNorm {
    n: usize,
    input_zp: i32,
    /// Left shift applied to the variance before the square root.
    var_shift: u32,
    newton_steps: u32,
    gamma: Vec<i64>,
    /// beta in units of `gamma_scale * 2^-Z_FRAC`
    beta: Vec<i64>,
    to_output: RequantMultiplier,
    output: QuantParams,
}

impl PreparedLayerNorm {
    /// `gamma` and `beta` are quantized here: gamma symmetric per-tensor at
    /// `gamma_bits`, beta folded into the accumulator domain as 32-bit integers.
    pub fn new(
        input: &QuantParams,
        gamma: &[f32],
        beta: &[f32],
        gamma_bits: crate::quant::BitWidth,
        output: &QuantParams,
        approx: Approx,
    ) -> Result<Self> {
        let n = gamma.len();
        if n < 2 || beta.len() != n {
            return Err(Error::Shape(format!(
                "layernorm needs matching gamma/beta of length >= 2, got {} and {}",
                n,
                beta.len()
            )));
        }
        output.validate()?;
        let span = (input.bits.qmax() - input.bits.qmin()) as u128;
        // sum of squared centered codes accumulates in 32 bits
        let worst = n as u128 * span * span;
        if worst > i32::MAX as u128 {
            return Err(Error::AccumulatorOverflow {
                site: "layernorm variance".into(),
                worst,
            });
        }
        // n^2 * var fits in 2^(2*log2(n*span)); shift it up to ~2^62 for the root
        let v_bits = 128 - (n as u128 * span).leading_zeros();
        let var_shift = (62u32.saturating_sub(2 * v_bits)) / 2 * 2;
        let gmax = gamma.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
        let gq = QuantParams::from_range(-gmax, gmax, gamma_bits, true)?;
        let gamma_codes: Vec<i64> = gamma.iter().map(|&g| gq.quantize_value(g) as i64).collect();
        let unit = gq.scale / (1u64 << Z_FRAC) as f64;
        let beta_codes = beta
            .iter()
            .map(|&b| {
                let v = (b as f64 / unit).round();
                if v.abs() >= (1u64 << 30) as f64 {
                    Err(Error::AccumulatorOverflow {
                        site: "layernorm beta".into(),
                        worst: v.abs() as u128,
                    })
                } else {
                    Ok(v as i64)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            input_zp: input.zero_point,
            var_shift,
            newton_steps: approx.newton_steps,
            gamma: gamma_codes,
            beta: beta_codes,
            to_output: RequantMultiplier::from_real(unit / output.scale)?,
            output: *output,
        })
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    pub fn run_row(&self, codes: &[i32], out: &mut [i32]) {
        debug_assert_eq!(codes.len(), self.n);
        let n = self.n as i64;
        let mut sum: i32 = 0;
        let mut sq: i32 = 0;
        for &c in codes {
            let x = c - self.input_zp;
            sum += x;
            sq += x * x;
        }
        // n^2 * variance, exact; deviations are kept scaled by n as well
        let var_n2 = n * sq as i64 - (sum as i64) * (sum as i64);
        // +1 on the integer variance keeps constant rows finite
        let stabilized = (var_n2 + 1) as u64;
        let s = self.var_shift;
        let root = isqrt_newton(stabilized << s, self.newton_steps).max(1) as i64;
        let z_shift = s / 2 + Z_FRAC;
        for (i, (o, &c)) in out.iter_mut().zip(codes).enumerate() {
            let d = n * (c - self.input_zp) as i64 - sum as i64;
            let z = div_round(d << z_shift, root);
            let acc = z * self.gamma[i] + self.beta[i];
            *o = self.output.bits.clamp(self.to_output.apply(acc) + self.output.zero_point as i64);
        }
    }
}

pub fn int_layernorm(
    x: &IntTensor,
    gamma: &[f32],
    beta: &[f32],
    gamma_bits: crate::quant::BitWidth,
    output: &QuantParams,
    approx: Approx,
) -> Result<IntTensor> {
    let n = *x.shape().last().ok_or_else(|| Error::Shape("layernorm of a scalar".into()))?;
    if n != gamma.len() {
        return Err(Error::Shape(format!("row length {n} vs gamma length {}", gamma.len())));
    }
    let plan = PreparedLayerNorm::new(x.qparams(), gamma, beta, gamma_bits, output, approx)?;
    let mut out = vec![0; x.len()];
    for (row, o) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        plan.run_row(row, o);
    }
    Ok(IntTensor::from_parts(x.shape().to_vec(), out, vec![*output]))
}

/// Float reference LayerNorm with the same epsilon as the float model.
pub fn layernorm_f64(x: &[f64], gamma: &[f32], beta: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (&g, &b))| (v - mean) * inv * g as f64 + b as f64)
        .collect()
}

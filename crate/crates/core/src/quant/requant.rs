//! Fixed-point rescaling between integer stages.
//!
//! A real multiplier `M` is stored as `mantissa * 2^-shift` with the mantissa
//! normalized into `[2^30, 2^31)`. Applying it is one widened multiply plus a
//! rounding right shift, so every stage boundary stays integer-only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{BitWidth, QuantParams};
use super::tensor::IntTensor;

const MANTISSA_MIN: i64 = 1 << 30;
const MANTISSA_LIMIT: i64 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantMultiplier {
    mantissa: i32,
    shift: u32,
}

impl RequantMultiplier {
    pub const ZERO: Self = Self { mantissa: 0, shift: 0 };

    /// Encode any multiplier in `[0, 2^30]`. Kernels use this for stage
    /// boundaries whose rescale factor exceeds one.
    pub fn from_real(m: f64) -> Result<Self> {
        if !m.is_finite() || m < 0.0 || m > (1u64 << 30) as f64 {
            return Err(Error::MultiplierRange(m));
        }
        if m == 0.0 {
            return Ok(Self::ZERO);
        }
        let (frac, exp) = frexp(m);
        // frac in [0.5, 1): mantissa = frac * 2^31, M = mantissa * 2^(exp - 31)
        let mut mantissa = (frac * MANTISSA_LIMIT as f64).round() as i64;
        let mut shift = 31 - exp as i64;
        if mantissa == MANTISSA_LIMIT {
            mantissa = MANTISSA_MIN;
            shift -= 1;
        }
        if shift < 0 {
            return Err(Error::MultiplierRange(m));
        }
        if shift > 126 {
            // Below 2^-95 every 32-bit accumulator rounds to zero anyway.
            return Ok(Self::ZERO);
        }
        Ok(Self {
            mantissa: mantissa as i32,
            shift: shift as u32,
        })
    }

    pub fn mantissa(&self) -> i32 {
        self.mantissa
    }

    pub fn shift(&self) -> u32 {
        self.shift
    }

    pub fn decode(&self) -> f64 {
        self.mantissa as f64 * (-(self.shift as f64)).exp2()
    }

    /// `round_half_away(acc * M)` in exact integer arithmetic.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        if self.shift < 63 && acc.unsigned_abs() < (1 << 32) {
            round_shift_i64(acc * self.mantissa as i64, self.shift)
        } else {
            round_shift_i128(acc as i128 * self.mantissa as i128, self.shift) as i64
        }
    }
}

/// Encode a real multiplier `M` in `(0, 1]`.
pub fn encode_multiplier(m: f64) -> Result<RequantMultiplier> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::MultiplierRange(m));
    }
    RequantMultiplier::from_real(m)
}

/// Divide by `2^shift`, rounding half away from zero.
#[inline]
pub fn round_shift_i64(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        return x;
    }
    let half = 1i64 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

#[inline]
pub fn round_shift_i128(x: i128, shift: u32) -> i128 {
    if shift == 0 {
        return x;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1i128 << (shift - 1);
    if x >= 0 {
        (x + half) >> shift
    } else {
        -((-x + half) >> shift)
    }
}

/// Integer division rounding half away from zero. `den > 0`.
#[inline]
pub fn div_round(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    if num >= 0 {
        (num + den / 2) / den
    } else {
        -((-num + den / 2) / den)
    }
}

/// Requantize one accumulator: `clamp(round(acc * M) + zero_point)`.
#[inline]
pub fn requantize_value(acc: i32, m: RequantMultiplier, bits: BitWidth, zero_point: i32) -> i32 {
    bits.clamp(m.apply(acc as i64) + zero_point as i64)
}

/// Rescale a 32-bit accumulator tensor into the narrow format described by `out`.
pub fn requantize(
    acc: &[i32],
    shape: &[usize],
    m: RequantMultiplier,
    out: QuantParams,
) -> Result<IntTensor> {
    out.validate()?;
    let data = acc
        .iter()
        .map(|&a| requantize_value(a, m, out.bits, out.zero_point))
        .collect();
    IntTensor::new(shape.to_vec(), data, vec![out])
}

fn frexp(x: f64) -> (f64, i32) {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i32;
    if exp_field == 0 {
        // subnormal: scale into the normal range first
        let (f, e) = frexp(x * (1u64 << 54) as f64);
        return (f, e - 54);
    }
    let exp = exp_field - 1022;
    let frac = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    (frac, exp)
}

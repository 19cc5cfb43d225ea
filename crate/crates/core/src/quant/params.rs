use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logical integer bit-width. Storage is always widened to `i32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B2,
    B3,
    B4,
    B8,
    B16,
}

impl BitWidth {
    pub const ALL: [BitWidth; 5] = [Self::B2, Self::B3, Self::B4, Self::B8, Self::B16];
    /// Precisions a block can be lowered to; `B16` is the baseline.
    pub const LOWERED: [BitWidth; 4] = [Self::B2, Self::B3, Self::B4, Self::B8];
    pub const BASELINE: BitWidth = Self::B16;

    pub fn bits(self) -> u32 {
        match self {
            Self::B2 => 2,
            Self::B3 => 3,
            Self::B4 => 4,
            Self::B8 => 8,
            Self::B16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        Ok(match bits {
            2 => Self::B2,
            3 => Self::B3,
            4 => Self::B4,
            8 => Self::B8,
            16 => Self::B16,
            other => return Err(Error::BitWidth(other)),
        })
    }

    /// Smallest representable code, `-2^(b-1)`.
    pub fn qmin(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    /// Largest representable code, `2^(b-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    /// The next lower width in the allowed set, if any.
    pub fn lower(self) -> Option<Self> {
        match self {
            Self::B2 => None,
            Self::B3 => Some(Self::B2),
            Self::B4 => Some(Self::B3),
            Self::B8 => Some(Self::B4),
            Self::B16 => Some(Self::B8),
        }
    }

    pub fn clamp(self, v: i64) -> i32 {
        v.clamp(self.qmin() as i64, self.qmax() as i64) as i32
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;
    fn try_from(bits: u32) -> Result<Self> {
        Self::from_bits(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl std::str::FromStr for BitWidth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits: u32 = s
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("not a bit-width: `{s}`")))?;
        Self::from_bits(bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One quantizer per slice along axis 0 (rows of a `[out, in]` weight).
    PerOutputChannel,
}

/// Scale used when the observed range collapses to a single point at zero.
pub const DEGENERATE_SCALE: f64 = 1.0 / 65536.0;

/// Affine quantizer: `real = (code - zero_point) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: BitWidth,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: BitWidth, symmetric: bool) -> Result<Self> {
        let q = Self {
            scale,
            zero_point,
            bits,
            symmetric,
            granularity: Granularity::PerTensor,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn symmetric(scale: f64, bits: BitWidth) -> Result<Self> {
        Self::new(scale, 0, bits, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::QuantParams(format!("scale must be positive, got {}", self.scale)));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::QuantParams(format!(
                "symmetric quantizer with zero_point {}",
                self.zero_point
            )));
        }
        if self.zero_point < self.bits.qmin() || self.zero_point > self.bits.qmax() {
            return Err(Error::QuantParams(format!(
                "zero_point {} outside {}-bit range",
                self.zero_point, self.bits
            )));
        }
        Ok(())
    }

    /// Quantizer covering `[min, max]` (extended to contain zero).
    pub fn from_range(min: f64, max: f64, bits: BitWidth, symmetric: bool) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::QuantParams(format!("bad range [{min}, {max}]")));
        }
        if symmetric {
            let amax = min.abs().max(max.abs());
            let scale = if amax == 0.0 { DEGENERATE_SCALE } else { amax / bits.qmax() as f64 };
            return Self::symmetric(scale, bits);
        }
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        if hi == lo {
            return Self::new(DEGENERATE_SCALE, 0, bits, false);
        }
        let (qmin, qmax) = (bits.qmin() as f64, bits.qmax() as f64);
        let scale = (hi - lo) / (qmax - qmin);
        let zp = (qmin - lo / scale).round().clamp(qmin, qmax) as i32;
        Self::new(scale, zp, bits, false)
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    /// `clamp(round(v / scale) + zero_point)`, rounding half away from zero.
    #[inline]
    pub fn quantize_value(&self, v: f32) -> i32 {
        let q = (v as f64 / self.scale).round();
        // `as i64` saturates, so huge inputs still clamp correctly.
        self.bits.clamp((q as i64).saturating_add(self.zero_point as i64))
    }

    #[inline]
    pub fn dequantize_value(&self, code: i32) -> f32 {
        ((code - self.zero_point) as f64 * self.scale) as f32
    }

    /// Real-valued interval this quantizer can represent.
    pub fn representable_range(&self) -> (f64, f64) {
        (
            (self.bits.qmin() - self.zero_point) as f64 * self.scale,
            (self.bits.qmax() - self.zero_point) as f64 * self.scale,
        )
    }
}

/// Min/max calibration over `values` laid out row-major with `shape`.
///
/// Per-output-channel granularity returns one quantizer per row (`shape[0]`);
/// per-tensor returns exactly one.
pub fn compute_qparams(
    values: &[f32],
    shape: &[usize],
    bits: BitWidth,
    symmetric: bool,
    granularity: Granularity,
) -> Result<Vec<QuantParams>> {
    if values.is_empty() {
        return Err(Error::Empty("cannot calibrate an empty tensor"));
    }
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} has {numel} elements, data has {}",
            values.len()
        )));
    }
    let range_of = |chunk: &[f32]| {
        chunk.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        })
    };
    match granularity {
        Granularity::PerTensor => {
            let (lo, hi) = range_of(values);
            Ok(vec![QuantParams::from_range(lo, hi, bits, symmetric)?])
        }
        Granularity::PerOutputChannel => {
            let rows = *shape.first().ok_or(Error::Empty("scalar has no channels"))?;
            let cols = numel / rows;
            values
                .chunks(cols)
                .map(|row| {
                    let (lo, hi) = range_of(row);
                    QuantParams::from_range(lo, hi, bits, symmetric)
                        .map(|q| q.with_granularity(Granularity::PerOutputChannel))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_ranges() {
        assert_eq!((BitWidth::B2.qmin(), BitWidth::B2.qmax()), (-2, 1));
        assert_eq!((BitWidth::B3.qmin(), BitWidth::B3.qmax()), (-4, 3));
        assert_eq!((BitWidth::B8.qmin(), BitWidth::B8.qmax()), (-128, 127));
        assert_eq!((BitWidth::B16.qmin(), BitWidth::B16.qmax()), (-32768, 32767));
        assert!(BitWidth::from_bits(5).is_err());
        assert_eq!(BitWidth::B16.lower(), Some(BitWidth::B8));
    }

    #[test]
    fn symmetric_full_range() {
        let q = compute_qparams(&[-1.0, 1.0], &[2], BitWidth::B8, true, Granularity::PerTensor)
            .unwrap()[0];
        assert!((q.scale - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(q.zero_point, 0);
    }

    #[test]
    fn degenerate_constant_zero() {
        let q = compute_qparams(&[0.0, 0.0], &[2], BitWidth::B8, false, Granularity::PerTensor)
            .unwrap()[0];
        assert_eq!(q.scale, DEGENERATE_SCALE);
        assert_eq!(q.zero_point, 0);
        assert_eq!(q.dequantize_value(q.quantize_value(0.0)), 0.0);
    }

    #[test]
    fn empty_and_shape_errors() {
        assert!(compute_qparams(&[], &[0], BitWidth::B8, true, Granularity::PerTensor).is_err());
        assert!(compute_qparams(&[1.0], &[2], BitWidth::B8, true, Granularity::PerTensor).is_err());
    }

    #[test]
    fn asymmetric_covers_range() {
        let q = QuantParams::from_range(-0.2, 3.9, BitWidth::B8, false).unwrap();
        let (lo, hi) = q.representable_range();
        assert!(lo <= -0.2 + q.scale / 2.0 && hi >= 3.9 - q.scale / 2.0);
        assert_eq!(q.quantize_value(0.0), q.zero_point);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(QuantParams::new(0.0, 0, BitWidth::B8, true).is_err());
        assert!(QuantParams::new(0.1, 3, BitWidth::B8, true).is_err());
        assert!(QuantParams::new(0.1, 200, BitWidth::B8, false).is_err());
    }

    #[test]
    fn per_channel_one_per_row() {
        let v = [1.0, -2.0, 0.5, 0.25];
        let qs = compute_qparams(&v, &[2, 2], BitWidth::B4, true, Granularity::PerOutputChannel)
            .unwrap();
        assert_eq!(qs.len(), 2);
        assert!((qs[0].scale - 2.0 / 7.0).abs() < 1e-12);
        assert!((qs[1].scale - 0.5 / 7.0).abs() < 1e-12);
    }
}

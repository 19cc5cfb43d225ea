//! Integer GELU.
//!
//! `GELU(x) = x/2 * (1 + erf(x / sqrt 2))`, with `erf` on `|u|` replaced by a
//! continuous three-piece quadratic (saturating to 1 past `u = 2.6`). The
//! argument and polynomial run in Q16.

use crate::error::Result;
use crate::quant::{IntTensor, QuantParams, RequantMultiplier};

use super::config::{Approx, KernelConfig};

/// `(upper breakpoint, a, b, c)` for `erf(u) ~ a u^2 + b u + c`, minimax on
/// the GELU error.
const ERF_PIECES: [(f64, f64, f64, f64); 3] = [
    (0.8, -0.313_417_424_2, 1.184_265_599_9, 0.0),
    (1.6, -0.291_986_062_2, 0.988_339_165_6, 0.143_025_075_7),
    (2.6, -0.034_398_986_9, 0.167_592_323_7, 0.796_797_110_3),
];

#[derive(Clone, Debug)]
struct Piece {
    upper: i64,
    a: i64,
    b: i64,
    c: i64,
}

#[derive(Clone, Debug)]
pub struct PreparedGelu {
    input: QuantParams,
    output: QuantParams,
    frac_bits: u32,
    to_arg: RequantMultiplier,
    to_output: RequantMultiplier,
    pieces: Vec<Piece>,
    /// Whole-range table for narrow inputs, filled by the same integer routine.
    table: Option<Vec<i32>>,
}

impl PreparedGelu {
    pub fn new(input: &QuantParams, output: &QuantParams, approx: Approx) -> Result<Self> {
        output.validate()?;
        let frac_bits = approx.gelu_frac_bits.min(24);
        let one = (1i64 << frac_bits) as f64;
        let pieces = ERF_PIECES
            .iter()
            .map(|&(upper, a, b, c)| Piece {
                upper: (upper * one).round() as i64,
                a: (a * one).round() as i64,
                b: (b * one).round() as i64,
                c: (c * one).round() as i64,
            })
            .collect();
        let mut plan = Self {
            input: *input,
            output: *output,
            frac_bits,
            to_arg: RequantMultiplier::from_real(input.scale * std::f64::consts::FRAC_1_SQRT_2 * one)?,
            to_output: RequantMultiplier::from_real(input.scale / (2.0 * output.scale * one))?,
            pieces,
            table: None,
        };
        if input.bits.bits() <= 8 {
            let table = (input.bits.qmin()..=input.bits.qmax()).map(|c| plan.eval(c)).collect();
            plan.table = Some(table);
        }
        Ok(plan)
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    fn erf_abs(&self, u: i64) -> i64 {
        let f = self.frac_bits;
        for p in &self.pieces {
            if u < p.upper {
                return ((p.a * u) >> f) * u / (1 << f) + ((p.b * u) >> f) + p.c;
            }
        }
        1 << f
    }

    fn eval(&self, code: i32) -> i32 {
        let x = (code - self.input.zero_point) as i64;
        let u = self.to_arg.apply(x.abs());
        let e = self.erf_abs(u);
        let one = 1i64 << self.frac_bits;
        let phi2 = if x >= 0 { one + e } else { one - e };
        self.output
            .bits
            .clamp(self.to_output.apply(x * phi2) + self.output.zero_point as i64)
    }

    #[inline]
    pub fn apply(&self, code: i32) -> i32 {
        match &self.table {
            Some(t) => t[(code - self.input.bits.qmin()) as usize],
            None => self.eval(code),
        }
    }
}

pub fn int_gelu(x: &IntTensor, cfg: &KernelConfig) -> Result<IntTensor> {
    let plan = PreparedGelu::new(x.qparams(), &cfg.output, cfg.approx)?;
    let data = x.data().iter().map(|&c| plan.apply(c)).collect();
    Ok(IntTensor::from_parts(x.shape().to_vec(), data, vec![cfg.output]))
}

/// Reference GELU (exact erf form).
pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, BitWidth};

    fn sweep_input() -> (IntTensor, QuantParams) {
        let inq = QuantParams::symmetric(4.0 / 127.0, BitWidth::B8).unwrap();
        let codes: Vec<i32> = (-128..=127).collect();
        (IntTensor::new(vec![256], codes, vec![inq]).unwrap(), inq)
    }

    #[test]
    fn zero_maps_to_zero() {
        let (_, inq) = sweep_input();
        let outq = QuantParams::from_range(-0.2, 4.1, BitWidth::B8, false).unwrap();
        let plan = PreparedGelu::new(&inq, &outq, Approx::default()).unwrap();
        assert_eq!(outq.dequantize_value(plan.apply(0)), 0.0);
    }

    #[test]
    fn identity_tail() {
        let (_, inq) = sweep_input();
        let outq = QuantParams::from_range(-0.2, 4.1, BitWidth::B8, false).unwrap();
        let plan = PreparedGelu::new(&inq, &outq, Approx::default()).unwrap();
        let c = 127;
        let x = inq.dequantize_value(c);
        assert!(x >= 4.0);
        assert!((outq.dequantize_value(plan.apply(c)) - x).abs() <= outq.scale as f32);
    }

    #[test]
    fn exhaustive_int8_sweep() {
        let (t, inq) = sweep_input();
        let lo = gelu_f64(inq.dequantize_value(-128) as f64).min(-0.17);
        let hi = gelu_f64(inq.dequantize_value(127) as f64);
        let outq = QuantParams::from_range(lo, hi, BitWidth::B8, false).unwrap();
        let out = int_gelu(&t, &KernelConfig::new(outq).unwrap()).unwrap();
        let got = dequantize(&out);
        let worst = dequantize(&t)
            .iter()
            .zip(&got)
            .map(|(&x, &y)| (gelu_f64(x as f64) - y as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 0.02, "worst {worst}");
    }

    #[test]
    fn polynomial_error_alone_is_small() {
        // 16-bit output isolates the approximation error from output rounding.
        let inq = QuantParams::symmetric(8.0 / 32767.0, BitWidth::B16).unwrap();
        let outq = QuantParams::symmetric(8.0 / 32767.0, BitWidth::B16).unwrap();
        let plan = PreparedGelu::new(&inq, &outq, Approx::default()).unwrap();
        for code in (-32768..=32767).step_by(7) {
            let x = inq.dequantize_value(code) as f64;
            let y = outq.dequantize_value(plan.apply(code)) as f64;
            assert!((gelu_f64(x) - y).abs() < 0.003, "x={x}");
        }
    }
}

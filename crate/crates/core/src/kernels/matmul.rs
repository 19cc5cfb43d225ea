use crate::error::{Error, Result};
use crate::quant::{IntTensor, QuantParams, RequantMultiplier};

use super::config::KernelConfig;

const I32_LIMIT: u128 = i32::MAX as u128;

/// Worst-case `|code - zero_point|` for a quantizer.
pub fn max_centered(q: &QuantParams) -> u128 {
    (q.bits.qmax() as i64 - q.zero_point as i64)
        .abs()
        .max((q.bits.qmin() as i64 - q.zero_point as i64).abs()) as u128
}

/// Reject shapes whose worst-case accumulator could leave 32 bits.
pub fn check_accumulator(site: &str, inner: usize, a_max: u128, w_max: u128, bias_max: u128) -> Result<()> {
    let worst = inner as u128 * a_max * w_max + bias_max;
    if worst > I32_LIMIT {
        return Err(Error::AccumulatorOverflow {
            site: site.to_string(),
            worst,
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
enum Rows {
    Narrow(Vec<i16>),
    Wide(Vec<i32>),
}

/// A weight matrix `[n, k]` with its bias and per-channel requantization
/// multipliers, ready to multiply against activations of a fixed quantizer.
#[derive(Clone, Debug)]
pub struct PreparedMatmul {
    n: usize,
    k: usize,
    rows: Rows,
    bias: Vec<i32>,
    input_zp: i32,
    multipliers: Vec<RequantMultiplier>,
    output: QuantParams,
}

impl PreparedMatmul {
    pub fn new(
        site: &str,
        weight: &IntTensor,
        bias: Option<Vec<i32>>,
        input: &QuantParams,
        output: &QuantParams,
    ) -> Result<Self> {
        let [n, k] = *weight.shape() else {
            return Err(Error::Shape(format!("{site}: weight must be 2-D, got {:?}", weight.shape())));
        };
        let bias = bias.unwrap_or_else(|| vec![0; n]);
        if bias.len() != n {
            return Err(Error::Shape(format!("{site}: bias has {} entries for {n} outputs", bias.len())));
        }
        let w_max = (0..n).map(|c| max_centered(weight.channel_params(c))).max().unwrap_or(0);
        let bias_max = bias.iter().map(|b| b.unsigned_abs() as u128).max().unwrap_or(0);
        check_accumulator(site, k, max_centered(input), w_max, bias_max)?;

        let centered: Vec<i32> = weight
            .data()
            .chunks(k.max(1))
            .enumerate()
            .flat_map(|(c, row)| {
                let zp = weight.channel_params(c).zero_point;
                row.iter().map(move |&w| w - zp)
            })
            .collect();
        let rows = if centered.iter().all(|&w| i16::try_from(w).is_ok()) {
            Rows::Narrow(centered.iter().map(|&w| w as i16).collect())
        } else {
            Rows::Wide(centered)
        };
        let multipliers = (0..n)
            .map(|c| {
                RequantMultiplier::from_real(input.scale * weight.channel_params(c).scale / output.scale)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n,
            k,
            rows,
            bias,
            input_zp: input.zero_point,
            multipliers,
            output: *output,
        })
    }

    pub fn out_features(&self) -> usize {
        self.n
    }

    pub fn in_features(&self) -> usize {
        self.k
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    /// Multiply `rows` activation rows (codes, row-major `[rows, k]`).
    pub fn run(&self, codes: &[i32]) -> Vec<i32> {
        let m = codes.len() / self.k.max(1);
        let mut out = Vec::with_capacity(m * self.n);
        let narrow_input = codes.iter().all(|&a| i16::try_from(a - self.input_zp).is_ok());
        let mut a16 = vec![0i16; self.k];
        let mut a32 = vec![0i32; self.k];
        for row in codes.chunks_exact(self.k) {
            match (&self.rows, narrow_input) {
                (Rows::Narrow(w), true) => {
                    for (d, &v) in a16.iter_mut().zip(row) {
                        *d = (v - self.input_zp) as i16;
                    }
                    for (c, wrow) in w.chunks_exact(self.k).enumerate() {
                        out.push(self.finish(c, dot_i16(&a16, wrow)));
                    }
                }
                (rows, _) => {
                    for (d, &v) in a32.iter_mut().zip(row) {
                        *d = v - self.input_zp;
                    }
                    for c in 0..self.n {
                        let acc = match rows {
                            Rows::Narrow(w) => dot_mixed(&a32, &w[c * self.k..(c + 1) * self.k]),
                            Rows::Wide(w) => dot_i32(&a32, &w[c * self.k..(c + 1) * self.k]),
                        };
                        out.push(self.finish(c, acc));
                    }
                }
            }
        }
        out
    }

    #[inline]
    fn finish(&self, channel: usize, acc: i32) -> i32 {
        let acc = acc.wrapping_add(self.bias[channel]);
        self.output
            .bits
            .clamp(self.multipliers[channel].apply(acc as i64) + self.output.zero_point as i64)
    }
}

// The accumulator bound is checked when the plan is built, so wrapping adds
// never actually wrap; they just keep the loops vectorizable.
#[inline]
pub(crate) fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x as i32 * y as i32))
}

#[inline]
pub(crate) fn dot_i32(a: &[i32], b: &[i32]) -> i32 {
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x.wrapping_mul(y)))
}

#[inline]
fn dot_mixed(a: &[i32], b: &[i16]) -> i32 {
    a.iter()
        .zip(b)
        .fold(0i32, |acc, (&x, &y)| acc.wrapping_add(x.wrapping_mul(y as i32)))
}

/// `requantize(sum_k (a - zp_a)(w - zp_w) + bias)` for `a: [m, k]`, `w: [n, k]`.
pub fn int_matmul(a: &IntTensor, w: &IntTensor, bias: Option<&[i32]>, cfg: &KernelConfig) -> Result<IntTensor> {
    let (&k, lead) = a
        .shape()
        .split_last()
        .ok_or_else(|| Error::Shape("matmul input is a scalar".into()))?;
    if w.shape().len() != 2 || w.shape()[1] != k {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: input {:?}, weight {:?}",
            a.shape(),
            w.shape()
        )));
    }
    let plan = PreparedMatmul::new("int_matmul", w, bias.map(<[i32]>::to_vec), a.qparams(), &cfg.output)?;
    let mut shape = lead.to_vec();
    shape.push(w.shape()[0]);
    Ok(IntTensor::from_parts(shape, plan.run(a.data()), vec![cfg.output]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{compute_qparams, dequantize, quantize, BitWidth, Granularity};
    use rand::{Rng, SeedableRng};

    fn sym(scale: f64) -> QuantParams {
        QuantParams::symmetric(scale, BitWidth::B8).unwrap()
    }

    #[test]
    fn one_by_one() {
        let a = IntTensor::new(vec![1, 1], vec![2], vec![sym(0.5)]).unwrap();
        let w = IntTensor::new(vec![1, 1], vec![3], vec![sym(0.25)]).unwrap();
        // real product 1.0 * 0.75 = 0.75; with out scale 0.125 -> 6 codes
        let cfg = KernelConfig::new(sym(0.125)).unwrap();
        assert_eq!(int_matmul(&a, &w, None, &cfg).unwrap().data(), &[6]);
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let n = 8;
        let mut eye = vec![0.0f32; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let wq = compute_qparams(&eye, &[n, n], BitWidth::B8, true, Granularity::PerOutputChannel).unwrap();
        let w = quantize(&eye, &[n, n], &wq).unwrap();
        let aq = sym(0.02);
        let codes: Vec<i32> = (0..n as i32).map(|i| i * 13 - 50).collect();
        let a = IntTensor::new(vec![1, n], codes.clone(), vec![aq]).unwrap();
        let out = int_matmul(&a, &w, None, &KernelConfig::new(aq).unwrap()).unwrap();
        assert_eq!(out.data(), codes.as_slice());
    }

    #[test]
    fn shape_mismatch() {
        let a = IntTensor::new(vec![1, 2], vec![1, 1], vec![sym(1.0)]).unwrap();
        let w = IntTensor::new(vec![1, 3], vec![1, 1, 1], vec![sym(1.0)]).unwrap();
        assert!(matches!(
            int_matmul(&a, &w, None, &KernelConfig::new(sym(1.0)).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn overflow_rejected() {
        let w16 = QuantParams::symmetric(1.0, BitWidth::B16).unwrap();
        let k = 1024;
        let a = IntTensor::new(vec![1, k], vec![0; k], vec![sym(1.0)]).unwrap();
        let w = IntTensor::new(vec![1, k], vec![0; k], vec![w16]).unwrap();
        let err = int_matmul(&a, &w, None, &KernelConfig::new(sym(1.0)).unwrap()).unwrap_err();
        assert!(matches!(err, Error::AccumulatorOverflow { .. }));
    }

    #[test]
    fn random_8x8_matches_float_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let av: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wv: Vec<f32> = (0..64).map(|_| rng.random_range(-0.5..0.5)).collect();
            let bv: Vec<f32> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
            let aq = QuantParams::from_range(-1.0, 1.0, BitWidth::B8, trial % 2 == 0).unwrap();
            let a = quantize(&av, &[8, 8], &[aq]).unwrap();
            let wq = compute_qparams(&wv, &[8, 8], BitWidth::B8, true, Granularity::PerOutputChannel).unwrap();
            let w = quantize(&wv, &[8, 8], &wq).unwrap();
            let bias: Vec<i32> = bv
                .iter()
                .zip(&wq)
                .map(|(&b, q)| (b as f64 / (aq.scale * q.scale)).round() as i32)
                .collect();
            let out_q = sym(2.0 / 127.0);
            let got = int_matmul(&a, &w, Some(&bias), &KernelConfig::new(out_q).unwrap()).unwrap();

            // float oracle on dequantized operands (bias at its accumulator scale)
            let ad = dequantize(&a);
            let wd = dequantize(&w);
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = bias[j] as f64 * aq.scale * wq[j].scale;
                    for t in 0..8 {
                        acc += ad[i * 8 + t] as f64 * wd[j * 8 + t] as f64;
                    }
                    let want = out_q.quantize_value(acc as f32);
                    assert!((got.data()[i * 8 + j] - want).abs() <= 1, "trial {trial} ({i},{j})");
                }
            }
        }
    }
}

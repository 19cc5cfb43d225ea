use crate::error::{Error, Result};
use crate::quant::{round_shift_i64, IntTensor, QuantParams, RequantMultiplier};

/// Rescale-and-add of two integer operands into a third quantizer.
#[derive(Clone, Copy, Debug)]
pub struct AddPlan {
    a_zp: i32,
    b_zp: i32,
    a_mul: RequantMultiplier,
    b_mul: RequantMultiplier,
    output: QuantParams,
}

impl AddPlan {
    pub fn new(a: &QuantParams, b: &QuantParams, output: &QuantParams) -> Result<Self> {
        output.validate()?;
        Ok(Self {
            a_zp: a.zero_point,
            b_zp: b.zero_point,
            a_mul: RequantMultiplier::from_real(a.scale / output.scale)?,
            b_mul: RequantMultiplier::from_real(b.scale / output.scale)?,
            output: *output,
        })
    }

    /// Plan from explicit operand-to-output multipliers, for operands whose
    /// scale varies per row (embedding tables).
    pub fn from_multipliers(
        a_zp: i32,
        a_mul: RequantMultiplier,
        b_zp: i32,
        b_mul: RequantMultiplier,
        output: &QuantParams,
    ) -> Self {
        Self {
            a_zp,
            b_zp,
            a_mul,
            b_mul,
            output: *output,
        }
    }

    pub fn output(&self) -> &QuantParams {
        &self.output
    }

    /// Both terms are brought to the finer of the two fixed-point grids,
    /// summed, then rounded once to output codes.
    #[inline]
    pub fn apply(&self, a: i32, b: i32) -> i32 {
        let ta = (a - self.a_zp) as i64 * self.a_mul.mantissa() as i64;
        let tb = (b - self.b_zp) as i64 * self.b_mul.mantissa() as i64;
        let (sa, sb) = (self.a_mul.shift(), self.b_mul.shift());
        let common = sa.min(sb);
        let sum = round_shift_i64(ta, (sa - common).min(63)) + round_shift_i64(tb, (sb - common).min(63));
        self.output.bits.clamp(round_shift_i64(sum, common.min(63)) + self.output.zero_point as i64)
    }
}

/// Elementwise `a + b` requantized into `output`.
pub fn int_add(a: &IntTensor, b: &IntTensor, output: &QuantParams) -> Result<IntTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let plan = AddPlan::new(a.qparams(), b.qparams(), output)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| plan.apply(x, y)).collect();
    Ok(IntTensor::from_parts(a.shape().to_vec(), data, vec![*output]))
}

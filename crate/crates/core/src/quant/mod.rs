//! Affine quantization primitives.

mod params;
mod requant;
mod tensor;

pub use params::{compute_qparams, BitWidth, Granularity, QuantParams, DEGENERATE_SCALE};
pub use requant::{
    div_round, encode_multiplier, requantize, requantize_value, round_shift_i128,
    round_shift_i64, RequantMultiplier,
};
pub use tensor::{dequantize, fake_quantize, quantize, IntTensor};

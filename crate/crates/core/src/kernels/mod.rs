//! Integer-only compute kernels. Every kernel ends in a requantization, so
//! each stage hands the next an [`IntTensor`](crate::quant::IntTensor) with
//! declared quantizers.

mod add;
mod attention;
mod config;
mod gelu;
mod layernorm;
mod matmul;
mod softmax;

pub use add::{int_add, AddPlan};
pub use attention::{int_attention, PreparedAttention};
pub use config::{Approx, AttentionConfig, KernelConfig};
pub use gelu::{gelu_f64, int_gelu, PreparedGelu};
pub use layernorm::{int_layernorm, isqrt_newton, layernorm_f64, PreparedLayerNorm};
pub use matmul::{check_accumulator, int_matmul, max_centered, PreparedMatmul};
pub use softmax::{int_softmax, probability_params, PreparedSoftmax};

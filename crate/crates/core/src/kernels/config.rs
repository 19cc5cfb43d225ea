use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// Approximation knobs for the nonlinear kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approx {
    /// Fractional bits of the base-2 exponent in softmax.
    pub exp_frac_bits: u32,
    /// Fractional bits of the erf argument in GELU.
    pub gelu_frac_bits: u32,
    /// Newton iterations after the bit-scan square-root seed in LayerNorm.
    pub newton_steps: u32,
}

impl Default for Approx {
    fn default() -> Self {
        Self {
            exp_frac_bits: 16,
            gelu_frac_bits: 16,
            newton_steps: 2,
        }
    }
}

/// Output quantizer plus approximation parameters for one kernel invocation.
///
/// Input and weight quantizers travel with the [`IntTensor`](crate::quant::IntTensor)
/// operands themselves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub output: QuantParams,
    pub approx: Approx,
}

impl KernelConfig {
    pub fn new(output: QuantParams) -> Result<Self> {
        output.validate()?;
        Ok(Self {
            output,
            approx: Approx::default(),
        })
    }

    pub fn with_approx(mut self, approx: Approx) -> Self {
        self.approx = approx;
        self
    }
}

/// Quantizers for the intermediate stages of scaled dot-product attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub causal: bool,
    /// Scaled scores `q.k / sqrt(d_head)` fed to softmax.
    pub scores: QuantParams,
    /// Softmax probabilities.
    pub probs: QuantParams,
    /// Attention context (probabilities times values).
    pub output: QuantParams,
    pub approx: Approx,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        self.scores.validate()?;
        self.probs.validate()?;
        self.output.validate()
    }
}

use crate::error::Result;
use crate::model::{BlockId, Model, PrecisionAssignment};
use crate::quant::{compute_qparams, fake_quantize, BitWidth, Granularity};

/// Weight-only post-training quantization of one block: every weight matrix
/// the block owns is rounded through a symmetric per-output-channel
/// quantizer. The 16-bit baseline is the float reference itself, so lowering
/// to 16 bits leaves the model untouched.
pub fn quantize_block(model: &Model, block: BlockId, bits: BitWidth) -> Result<Model> {
    model.check_block(block)?;
    let mut out = model.clone();
    if bits == BitWidth::BASELINE {
        return Ok(out);
    }
    for p in out.params_mut() {
        if p.owner != block || p.shape.len() != 2 {
            continue;
        }
        let params = compute_qparams(p.data, &p.shape, bits, true, Granularity::PerOutputChannel)?;
        *p.data = fake_quantize(p.data, &p.shape, &params)?;
    }
    Ok(out)
}

/// Apply every block's bit-width of `assignment`.
pub fn apply_assignment(model: &Model, assignment: &PrecisionAssignment) -> Result<Model> {
    assignment.validate(&model.config)?;
    let mut out = model.clone();
    for (block, bits) in assignment.iter() {
        out = quantize_block(&out, block, bits)?;
    }
    Ok(out)
}

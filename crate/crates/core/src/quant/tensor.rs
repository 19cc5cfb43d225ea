use crate::error::{Error, Result};

use super::params::{Granularity, QuantParams};

/// Integer payload with its quantizer(s).
///
/// `params` holds one quantizer for per-tensor data, or one per slice along
/// axis 0 for per-output-channel data.
#[derive(Clone, Debug, PartialEq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    params: Vec<QuantParams>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, params: Vec<QuantParams>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} has {numel} elements, data has {}",
                data.len()
            )));
        }
        let expected = match params.first().map(|p| p.granularity) {
            None => return Err(Error::Empty("int tensor without quantizer")),
            Some(Granularity::PerTensor) => 1,
            Some(Granularity::PerOutputChannel) => *shape.first().unwrap_or(&1),
        };
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} quantizers for {expected} channels",
                params.len()
            )));
        }
        let bits = params[0].bits;
        for p in &params {
            p.validate()?;
            if p.bits != bits {
                return Err(Error::QuantParams("mixed bit-widths in one tensor".into()));
            }
        }
        if let Some(bad) = data.iter().find(|&&v| v < bits.qmin() || v > bits.qmax()) {
            return Err(Error::QuantParams(format!("code {bad} outside {bits}-bit range")));
        }
        Ok(Self { shape, data, params })
    }

    /// Caller guarantees the invariants; used on kernel outputs that clamp by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>, params: Vec<QuantParams>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, params }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    /// The per-tensor quantizer (or that of channel 0).
    pub fn qparams(&self) -> &QuantParams {
        &self.params[0]
    }

    pub fn channel_params(&self, channel: usize) -> &QuantParams {
        if self.params.len() == 1 {
            &self.params[0]
        } else {
            &self.params[channel]
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Length of the trailing row (elements per axis-0 slice).
    pub fn row_len(&self) -> usize {
        let rows = self.shape.first().copied().unwrap_or(1).max(1);
        self.data.len() / rows
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, i32> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data.chunks_exact(cols.max(1))
    }
}

/// Quantize row-major `values` with one quantizer or one per axis-0 slice.
pub fn quantize(values: &[f32], shape: &[usize], params: &[QuantParams]) -> Result<IntTensor> {
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} has {numel} elements, data has {}",
            values.len()
        )));
    }
    let data = if params.len() == 1 {
        values.iter().map(|&v| params[0].quantize_value(v)).collect()
    } else {
        let rows = shape.first().copied().unwrap_or(0);
        if rows != params.len() || rows == 0 {
            return Err(Error::Shape(format!("{} quantizers for {rows} rows", params.len())));
        }
        let cols = numel / rows;
        values
            .chunks(cols)
            .zip(params)
            .flat_map(|(row, q)| row.iter().map(move |&v| q.quantize_value(v)))
            .collect()
    };
    IntTensor::new(shape.to_vec(), data, params.to_vec())
}

/// Reference-path reconstruction: `(code - zero_point) * scale`.
pub fn dequantize(t: &IntTensor) -> Vec<f32> {
    if t.params.len() == 1 {
        let q = &t.params[0];
        return t.data.iter().map(|&c| q.dequantize_value(c)).collect();
    }
    let cols = t.row_len();
    t.data
        .chunks(cols)
        .zip(&t.params)
        .flat_map(|(row, q)| row.iter().map(move |&c| q.dequantize_value(c)))
        .collect()
}

/// Quantize then dequantize ("fake quantization") in place of the originals.
pub fn fake_quantize(values: &[f32], shape: &[usize], params: &[QuantParams]) -> Result<Vec<f32>> {
    Ok(dequantize(&quantize(values, shape, params)?))
}

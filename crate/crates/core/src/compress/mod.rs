//! Compression passes: per-block weight quantization, the one-block-at-a-time
//! sensitivity scan, and structural pruning.

mod quantize;
mod structural;

pub use quantize::{apply_assignment, quantize_block};
pub use structural::{prune_mlp_channels, remove_blocks, token_drop, StructuralPlan};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::fingerprint;
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{BlockId, Calibration, IntModel, Model, PrecisionAssignment};
use crate::quant::BitWidth;

/// Scores a precision assignment on a fixed slice; lower is better.
pub trait Evaluator: Sync {
    fn evaluate(&self, assignment: &PrecisionAssignment) -> Result<f64>;
    fn model(&self) -> &Model;
    fn corpus_fingerprint(&self) -> &str;
}

/// Perplexity of the float model with weights fake-quantized per block.
pub struct FakeQuantEvaluator<'a> {
    model: &'a Model,
    slice: Vec<Vec<u32>>,
    fingerprint: String,
}

impl<'a> FakeQuantEvaluator<'a> {
    pub fn new(model: &'a Model, slice: Vec<Vec<u32>>) -> Self {
        let fingerprint = fingerprint(&slice);
        Self {
            model,
            slice,
            fingerprint,
        }
    }
}

impl Evaluator for FakeQuantEvaluator<'_> {
    fn evaluate(&self, assignment: &PrecisionAssignment) -> Result<f64> {
        perplexity(&apply_assignment(self.model, assignment)?, &self.slice)
    }

    fn model(&self) -> &Model {
        self.model
    }

    fn corpus_fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Perplexity of the integer-only model built for each assignment.
pub struct IntegerEvaluator<'a> {
    model: &'a Model,
    calibration: &'a Calibration,
    slice: Vec<Vec<u32>>,
    fingerprint: String,
}

impl<'a> IntegerEvaluator<'a> {
    pub fn new(model: &'a Model, calibration: &'a Calibration, slice: Vec<Vec<u32>>) -> Result<Self> {
        calibration.check_model(model)?;
        let fingerprint = fingerprint(&slice);
        Ok(Self {
            model,
            calibration,
            slice,
            fingerprint,
        })
    }
}

impl Evaluator for IntegerEvaluator<'_> {
    fn evaluate(&self, assignment: &PrecisionAssignment) -> Result<f64> {
        perplexity(&IntModel::build(self.model, assignment, self.calibration)?, &self.slice)
    }

    fn model(&self) -> &Model {
        self.model
    }

    fn corpus_fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub block: BlockId,
    pub bits: BitWidth,
    pub metric: f64,
    /// `metric - baseline_metric`
    pub delta: f64,
}

/// Metric per (block, bit-width) with every other block at the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub baseline_metric: f64,
    pub corpus_fingerprint: String,
    /// Scanned bit-widths, ascending; always ends with the baseline.
    pub precisions: Vec<BitWidth>,
    /// Sorted by block, then bits.
    pub entries: Vec<SensitivityEntry>,
}

/// One block's metric at two adjacent precisions where the lower precision
/// scored better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub block: BlockId,
    pub lower_bits: BitWidth,
    pub higher_bits: BitWidth,
    pub lower_metric: f64,
    pub higher_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub monotone: usize,
    pub violations: Vec<MonotonicityViolation>,
}

impl MonotonicityReport {
    pub fn fraction(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.monotone as f64 / self.pairs as f64
        }
    }
}

impl SensitivityProfile {
    pub fn get(&self, block: BlockId, bits: BitWidth) -> Option<&SensitivityEntry> {
        self.entries
            .binary_search_by(|e| (e.block, e.bits).cmp(&(block, bits)))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn blocks(&self) -> Vec<BlockId> {
        let mut out: Vec<BlockId> = self.entries.iter().map(|e| e.block).collect();
        out.dedup();
        out
    }

    /// Checks every (block, adjacent precision) pair for
    /// `metric(lower) >= metric(higher)`.
    pub fn monotonicity(&self) -> MonotonicityReport {
        let mut report = MonotonicityReport {
            pairs: 0,
            monotone: 0,
            violations: Vec::new(),
        };
        for block in self.blocks() {
            for w in self.precisions.windows(2) {
                let (Some(lo), Some(hi)) = (self.get(block, w[0]), self.get(block, w[1])) else {
                    continue;
                };
                report.pairs += 1;
                if lo.metric >= hi.metric {
                    report.monotone += 1;
                } else {
                    report.violations.push(MonotonicityViolation {
                        block,
                        lower_bits: w[0],
                        higher_bits: w[1],
                        lower_metric: lo.metric,
                        higher_metric: hi.metric,
                    });
                }
            }
        }
        report
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lower one block at a time to each precision in `precisions` (plus the
/// baseline) and record the metric. Grid points run in parallel; the profile
/// is ordered by key.
pub fn sensitivity_scan<E: Evaluator + ?Sized>(evaluator: &E, precisions: &[BitWidth]) -> Result<SensitivityProfile> {
    if precisions.is_empty() {
        return Err(Error::Empty("precision set"));
    }
    let config = &evaluator.model().config;
    let mut bits: Vec<BitWidth> = precisions.to_vec();
    bits.push(BitWidth::BASELINE);
    bits.sort();
    bits.dedup();
    let baseline = PrecisionAssignment::baseline(config);
    let baseline_metric = evaluator.evaluate(&baseline)?;
    let grid: Vec<(BlockId, BitWidth)> = config
        .block_ids()
        .into_iter()
        .flat_map(|b| bits.iter().map(move |&w| (b, w)))
        .collect();
    let entries = grid
        .par_iter()
        .map(|&(block, w)| {
            let metric = if w == BitWidth::BASELINE {
                baseline_metric
            } else {
                evaluator
                    .evaluate(&baseline.clone().with(block, w))
                    .map_err(|e| Error::Evaluation {
                        block,
                        bits: w,
                        source: Box::new(e),
                    })?
            };
            Ok(SensitivityEntry {
                block,
                bits: w,
                metric,
                delta: metric - baseline_metric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityProfile {
        baseline_metric,
        corpus_fingerprint: evaluator.corpus_fingerprint().to_string(),
        precisions: bits,
        entries,
    })
}

//! Pareto exploration of per-block precision assignments: memory against
//! perplexity, both minimized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{Evaluator, SensitivityProfile};
use crate::error::{Error, Result};
use crate::model::{BlockId, Model, PrecisionAssignment};
use crate::quant::BitWidth;

/// Most assignments an exhaustive sweep may evaluate.
pub const EXHAUSTIVE_CAP: u128 = 4096;

/// Weight storage in bytes: every weight matrix at its block's bit-width,
/// rounded up to whole bytes once over the model. Vectors (biases,
/// LayerNorm parameters) are not counted.
pub fn memory_footprint(model: &Model, assignment: &PrecisionAssignment) -> Result<u64> {
    let mut bits: u128 = 0;
    for p in model.params() {
        if p.is_matrix() {
            bits += p.data.len() as u128 * assignment.get(p.owner)?.bits() as u128;
        }
    }
    Ok(bits.div_ceil(8) as u64)
}

/// Every combination of `precisions` over `blocks`, the first block varying
/// slowest, in the order `precisions` is given. Blocks not listed keep their
/// value from `base`.
pub fn enumerate_assignments(
    base: &PrecisionAssignment,
    blocks: &[BlockId],
    precisions: &[BitWidth],
) -> Result<Vec<PrecisionAssignment>> {
    if precisions.is_empty() {
        return Err(Error::Empty("precision set"));
    }
    let mut seen = blocks.to_vec();
    seen.sort();
    seen.dedup();
    if seen.len() != blocks.len() {
        return Err(Error::Invalid("duplicate block in exploration set".into()));
    }
    let count = (precisions.len() as u128)
        .checked_pow(blocks.len() as u32)
        .unwrap_or(u128::MAX);
    if count > EXHAUSTIVE_CAP {
        return Err(Error::ExhaustiveCap {
            count,
            cap: EXHAUSTIVE_CAP,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0usize; blocks.len()];
    loop {
        let mut a = base.clone();
        for (&b, &d) in blocks.iter().zip(&digits) {
            a.set(b, precisions[d]);
        }
        out.push(a);
        // odometer, last block fastest
        let mut i = blocks.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < precisions.len() {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// `a` dominates `b` when it is no worse on both axes and better on one.
pub fn dominates(a: (u64, f64), b: (u64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

/// Indices of the non-dominated `(memory, metric)` points, ascending.
/// Points tied on both axes are all kept.
pub fn pareto_front(points: &[(u64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    if points.iter().any(|p| p.1.is_nan()) {
        return Err(Error::Invalid("NaN metric in point set".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.cmp(&points[b].0).then(points[a].1.total_cmp(&points[b].1)));
    let mut front = Vec::new();
    // best metric among strictly smaller memory
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let mem = points[order[i]].0;
        let group_min = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == mem {
            if group_min < best && points[order[j]].1 == group_min {
                front.push(order[j]);
            }
            j += 1;
        }
        best = best.min(group_min);
        i = j;
    }
    front.sort_unstable();
    Ok(front)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub assignment: PrecisionAssignment,
    pub memory_bytes: u64,
    pub memory_saving: f64,
    pub metric: f64,
    pub on_front: bool,
    /// Set by [`flag_against`]: a reference point that dominates this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dominated_by: Option<PrecisionAssignment>,
}

impl ParetoPoint {
    fn key(&self) -> (u64, f64) {
        (self.memory_bytes, self.metric)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Exhaustive,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoReport {
    pub strategy: Strategy,
    pub corpus_fingerprint: String,
    pub baseline_bytes: u64,
    pub baseline: ParetoPoint,
    /// Every evaluated point, in evaluation order.
    pub points: Vec<ParetoPoint>,
    /// Front points sorted by memory, then metric.
    pub front: Vec<ParetoPoint>,
}

impl ParetoReport {
    fn assemble(
        strategy: Strategy,
        corpus_fingerprint: &str,
        baseline_bytes: u64,
        baseline: ParetoPoint,
        mut points: Vec<ParetoPoint>,
    ) -> Result<Self> {
        let keys: Vec<(u64, f64)> = points.iter().map(ParetoPoint::key).collect();
        for i in pareto_front(&keys)? {
            points[i].on_front = true;
        }
        let mut front: Vec<ParetoPoint> = points.iter().filter(|p| p.on_front).cloned().collect();
        front.sort_by(|a, b| {
            a.memory_bytes
                .cmp(&b.memory_bytes)
                .then(a.metric.total_cmp(&b.metric))
                .then(a.assignment.as_map().cmp(b.assignment.as_map()))
        });
        let baseline = points
            .iter()
            .find(|p| p.assignment == baseline.assignment)
            .cloned()
            .unwrap_or(baseline);
        Ok(Self {
            strategy,
            corpus_fingerprint: corpus_fingerprint.to_string(),
            baseline_bytes,
            baseline,
            points,
            front,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per evaluated point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("assignment,memory_bytes,memory_saving,metric,on_front\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.assignment, p.memory_bytes, p.memory_saving, p.metric, p.on_front
            ));
        }
        s
    }
}

fn point(model: &Model, assignment: PrecisionAssignment, metric: f64, baseline_bytes: u64) -> Result<ParetoPoint> {
    let memory_bytes = memory_footprint(model, &assignment)?;
    Ok(ParetoPoint {
        assignment,
        memory_bytes,
        memory_saving: 1.0 - memory_bytes as f64 / baseline_bytes as f64,
        metric,
        on_front: false,
        dominated_by: None,
    })
}

fn evaluate_all<E: Evaluator + ?Sized>(evaluator: &E, assignments: Vec<PrecisionAssignment>) -> Result<Vec<ParetoPoint>> {
    let model = evaluator.model();
    let baseline_bytes = memory_footprint(model, &PrecisionAssignment::baseline(&model.config))?;
    assignments
        .into_par_iter()
        .map(|a| {
            let metric = evaluator.evaluate(&a)?;
            point(model, a, metric, baseline_bytes)
        })
        .collect()
}

/// Evaluate every assignment of `precisions` over `blocks`, all other blocks
/// at baseline. The baseline is always among the points.
pub fn explore_exhaustive<E: Evaluator + ?Sized>(
    evaluator: &E,
    blocks: &[BlockId],
    precisions: &[BitWidth],
) -> Result<ParetoReport> {
    let model = evaluator.model();
    let base = PrecisionAssignment::baseline(&model.config);
    for &b in blocks {
        base.get(b)?;
    }
    let mut assignments = enumerate_assignments(&base, blocks, precisions)?;
    if !assignments.contains(&base) {
        assignments.insert(0, base.clone());
    }
    let points = evaluate_all(evaluator, assignments)?;
    let baseline = points.iter().find(|p| p.assignment == base).cloned().expect("baseline evaluated");
    ParetoReport::assemble(
        Strategy::Exhaustive,
        evaluator.corpus_fingerprint(),
        baseline.memory_bytes,
        baseline,
        points,
    )
}

/// Greedy descent from the all-baseline assignment. Each step considers
/// lowering one block to its next lower precision; the `beam` candidates
/// with the best ratio predicted by `profile` are evaluated, and the one
/// with the best measured memory saved per unit of metric lost is taken.
/// Stops after `budget` steps, when nothing can be lowered, or when every
/// candidate breaks the quality floor `baseline * (1 + max_degradation)`.
pub fn greedy_search<E: Evaluator + ?Sized>(
    evaluator: &E,
    profile: &SensitivityProfile,
    precisions: &[BitWidth],
    budget: usize,
    max_degradation: Option<f64>,
    beam: usize,
) -> Result<ParetoReport> {
    let model = evaluator.model();
    if profile.corpus_fingerprint != evaluator.corpus_fingerprint() {
        return Err(Error::Invalid("sensitivity profile was measured on a different slice".into()));
    }
    let mut ladder: Vec<BitWidth> = precisions.to_vec();
    ladder.push(BitWidth::BASELINE);
    ladder.sort();
    ladder.dedup();
    let base = PrecisionAssignment::baseline(&model.config);
    let baseline_bytes = memory_footprint(model, &base)?;
    let baseline = point(model, base.clone(), evaluator.evaluate(&base)?, baseline_bytes)?;
    let floor = max_degradation.map(|d| baseline.metric * (1.0 + d));
    let predicted = |block: BlockId, bits: BitWidth| -> f64 {
        profile.get(block, bits).map_or(f64::INFINITY, |e| e.delta)
    };

    let mut points = vec![baseline.clone()];
    let mut current = baseline.clone();
    for _ in 0..budget {
        let mut candidates: Vec<(BlockId, BitWidth, u64, f64)> = Vec::new();
        for (block, bits) in current.assignment.iter() {
            let pos = ladder.iter().position(|&b| b == bits);
            let Some(lower) = pos.filter(|&p| p > 0).map(|p| ladder[p - 1]) else {
                continue;
            };
            let saved = current.memory_bytes - memory_footprint(model, &current.assignment.clone().with(block, lower))?;
            let cost = (predicted(block, lower) - predicted(block, bits)).max(0.0);
            candidates.push((block, lower, saved, cost));
        }
        if candidates.is_empty() {
            break;
        }
        // predicted ratio, best first; ties by block order
        candidates.sort_by(|a, b| {
            let ra = ratio(a.2, a.3);
            let rb = ratio(b.2, b.3);
            rb.total_cmp(&ra).then(a.0.cmp(&b.0))
        });
        candidates.truncate(beam.max(1));
        let evaluated = evaluate_all(
            evaluator,
            candidates
                .iter()
                .map(|&(block, lower, _, _)| current.assignment.clone().with(block, lower))
                .collect(),
        )?;
        points.extend(evaluated.iter().cloned());
        let best = evaluated
            .into_iter()
            .filter(|p| floor.is_none_or(|f| p.metric <= f))
            .map(|p| {
                let r = ratio(current.memory_bytes - p.memory_bytes, p.metric - current.metric);
                (r, p)
            })
            .fold(None::<(f64, ParetoPoint)>, |acc, (r, p)| match acc {
                Some((br, bp)) if br >= r => Some((br, bp)),
                _ => Some((r, p)),
            });
        match best {
            Some((_, p)) => current = p,
            None => break,
        }
    }
    ParetoReport::assemble(
        Strategy::Greedy,
        evaluator.corpus_fingerprint(),
        baseline_bytes,
        baseline,
        points,
    )
}

/// Memory saved per unit of metric lost; free or improving steps rank by
/// memory alone, above every costly step.
fn ratio(saved: u64, cost: f64) -> f64 {
    if cost <= 0.0 {
        1e300 * (1.0 + saved as f64)
    } else {
        saved as f64 / cost
    }
}

/// Mark each front point of `report` that some `reference` point dominates.
/// Returns how many were flagged.
pub fn flag_against(report: &mut ParetoReport, reference: &[ParetoPoint]) -> usize {
    let mut flagged = 0;
    for p in report.front.iter_mut().chain(report.points.iter_mut().filter(|p| p.on_front)) {
        p.dominated_by = reference
            .iter()
            .find(|r| dominates(r.key(), p.key()))
            .map(|r| r.assignment.clone());
    }
    for p in &report.front {
        flagged += usize::from(p.dominated_by.is_some());
    }
    flagged
}

/// The front point with the largest saving whose metric stays within
/// `baseline * (1 + max_degradation)`; ties go to the lower metric.
pub fn select_under_constraint(report: &ParetoReport, max_degradation: f64) -> Result<ParetoPoint> {
    if report.front.is_empty() {
        return Err(Error::Empty("Pareto front"));
    }
    let limit = report.baseline.metric * (1.0 + max_degradation);
    report
        .front
        .iter()
        .filter(|p| p.metric <= limit)
        .min_by(|a, b| a.memory_bytes.cmp(&b.memory_bytes).then(a.metric.total_cmp(&b.metric)))
        .cloned()
        .ok_or(Error::Unsatisfiable { limit })
}

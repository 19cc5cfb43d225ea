//! Metrics: perplexity, accuracy, agreement, and profiled runs with
//! analytic MAC accounting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::fingerprint;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Logits, ModelConfig, OpCounts, TokenDrop};

/// `ln(sum(exp(row)))` accumulated in f64.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

/// Summed negative log-likelihood and prediction count for one sequence.
fn sequence_nll(logits: &Logits, seq: &[u32]) -> (f64, usize) {
    let mut nll = 0.0;
    let mut n = 0;
    for (i, &p) in logits.positions.iter().enumerate() {
        if let Some(&next) = seq.get(p + 1) {
            let row = logits.row(i);
            nll += log_sum_exp(row) - row[next as usize] as f64;
            n += 1;
        }
    }
    (nll, n)
}

fn check_slice(slice: &[Vec<u32>]) -> Result<()> {
    if slice.is_empty() || slice.iter().all(|s| s.len() < 2) {
        return Err(Error::Empty("evaluation slice has no next-token predictions"));
    }
    Ok(())
}

/// Mean negative log-likelihood over every next-token prediction the model
/// produces for `slice`, plus the ops it took.
pub fn mean_nll<M: LanguageModel + ?Sized>(model: &M, slice: &[Vec<u32>]) -> Result<(f64, OpCounts)> {
    check_slice(slice)?;
    let per_seq: Vec<(f64, usize, OpCounts)> = slice
        .par_iter()
        .map(|seq| {
            let mut ops = OpCounts::default();
            let l = model.logits(&seq[..seq.len() - 1], None, &mut ops)?;
            let (nll, n) = sequence_nll(&l, seq);
            Ok((nll, n, ops))
        })
        .collect::<Result<_>>()?;
    let mut ops = OpCounts::default();
    let (mut nll, mut n) = (0.0, 0usize);
    for (a, b, o) in &per_seq {
        nll += a;
        n += b;
        ops.add(o);
    }
    if n == 0 {
        return Err(Error::Empty("evaluation slice has no next-token predictions"));
    }
    Ok((nll / n as f64, ops))
}

/// `exp(mean NLL)` over the slice.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, slice: &[Vec<u32>]) -> Result<f64> {
    Ok(mean_nll(model, slice)?.0.exp())
}

/// Fraction of `(context, label)` pairs whose greedy next token is the label.
pub fn accuracy<M: LanguageModel + ?Sized>(model: &M, labeled: &[(Vec<u32>, u32)]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::Empty("accuracy needs at least one labeled example"));
    }
    let correct: usize = labeled
        .par_iter()
        .map(|(ctx, label)| {
            let l = model.logits(ctx, None, &mut OpCounts::default())?;
            Ok(usize::from(l.best.last() == Some(label)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / labeled.len() as f64)
}

/// Fraction of positions (produced by both models) where the greedy
/// next-token choices agree.
pub fn agreement<A, B>(a: &A, b: &B, slice: &[Vec<u32>]) -> Result<f64>
where
    A: LanguageModel + ?Sized,
    B: LanguageModel + ?Sized,
{
    check_slice(slice)?;
    let counts: Vec<(usize, usize)> = slice
        .par_iter()
        .map(|seq| {
            let ctx = &seq[..seq.len() - 1];
            let la = a.logits(ctx, None, &mut OpCounts::default())?;
            let lb = b.logits(ctx, None, &mut OpCounts::default())?;
            let mut same = 0;
            let mut total = 0;
            for (i, p) in la.positions.iter().enumerate() {
                if let Some(j) = lb.positions.iter().position(|q| q == p) {
                    total += 1;
                    same += usize::from(la.best[i] == lb.best[j]);
                }
            }
            Ok((same, total))
        })
        .collect::<Result<_>>()?;
    let (same, total) = counts.iter().fold((0, 0), |(s, t), &(a, b)| (s + a, t + b));
    if total == 0 {
        return Err(Error::Empty("no shared positions to compare"));
    }
    Ok(same as f64 / total as f64)
}

/// Closed-form MACs of one forward over `t` fresh tokens: per block
/// `t (4 d^2 + 2 d ff) + d t (t + 1)`, plus `t d V` in the head, with `t`
/// reduced to `ceil(keep_fraction t)` after a token-drop boundary.
pub fn analytic_macs(config: &ModelConfig, ff_widths: &[usize], token_drop: Option<TokenDrop>, t: usize) -> u64 {
    let d = config.d_model as u64;
    let mut rows = t as u64;
    let mut total = 0;
    for (i, &ff) in ff_widths.iter().enumerate() {
        total += rows * (4 * d * d + 2 * d * ff as u64) + d * rows * (rows + 1);
        if let Some(td) = token_drop.filter(|td| td.after_block == i) {
            rows = td.kept(rows as usize) as u64;
        }
    }
    total + rows * d * config.vocab_size as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Perplexity,
    Accuracy,
    Agreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub value: f64,
    pub corpus_fingerprint: String,
    /// Model / assignment / plan description.
    pub descriptor: String,
    pub ops: OpCounts,
    /// Closed-form MACs for the same slice.
    pub analytic_macs: u64,
    /// Measured after one warmup pass; informational only.
    pub wall_clock_ms: f64,
}

/// Perplexity with counted and closed-form MACs and a timed pass.
pub fn profile_run<M: LanguageModel + ?Sized>(
    model: &M,
    ff_widths: &[usize],
    token_drop: Option<TokenDrop>,
    descriptor: &str,
    slice: &[Vec<u32>],
) -> Result<EvalReport> {
    check_slice(slice)?;
    // warmup
    mean_nll(model, &slice[..1])?;
    let start = Instant::now();
    let (nll, ops) = mean_nll(model, slice)?;
    let wall_clock_ms = start.elapsed().as_secs_f64() * 1e3;
    let value = nll.exp();
    if !value.is_finite() {
        return Err(Error::Invalid(format!("non-finite perplexity for {descriptor}")));
    }
    let analytic = slice
        .iter()
        .map(|s| analytic_macs(model.config(), ff_widths, token_drop, s.len() - 1))
        .sum();
    Ok(EvalReport {
        metric: MetricKind::Perplexity,
        value,
        corpus_fingerprint: fingerprint(slice),
        descriptor: descriptor.to_string(),
        ops,
        analytic_macs: analytic,
        wall_clock_ms,
    })
}

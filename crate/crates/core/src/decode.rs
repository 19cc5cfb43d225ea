//! Speculative decoding and confidence-gated cascades over a draft/target
//! model pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::log_sum_exp;
use crate::model::{LanguageModel, OpCounts};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecDecodeStats {
    pub proposed: usize,
    pub accepted: usize,
    pub target_calls: usize,
    pub draft_calls: usize,
    /// `accepted / proposed`; 0 when nothing was proposed.
    pub acceptance_rate: f64,
}

fn check_pair<D, T>(draft: &D, target: &T) -> Result<()>
where
    D: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    let (dv, tv) = (draft.config().vocab_size, target.config().vocab_size);
    if dv != tv {
        return Err(Error::VocabMismatch { draft: dv, target: tv });
    }
    Ok(())
}

/// Greedy speculative decoding. The draft proposes up to `gamma` tokens,
/// the target scores them in one call, the longest prefix matching the
/// target's own greedy choices is kept, and the target's next token is
/// appended. The output equals target greedy decoding token for token.
pub fn speculative_decode<D, T>(
    draft: &D,
    target: &T,
    prompt: &[u32],
    n_steps: usize,
    gamma: usize,
) -> Result<(Vec<u32>, SpecDecodeStats)>
where
    D: LanguageModel + ?Sized,
    T: LanguageModel + ?Sized,
{
    check_pair(draft, target)?;
    if gamma == 0 {
        return Err(Error::Invalid("draft length must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("speculative decoding needs a non-empty prompt"));
    }
    let mut stats = SpecDecodeStats::default();
    if n_steps == 0 {
        return Ok((Vec::new(), stats));
    }
    let max = target.config().max_seq_len.min(draft.config().max_seq_len);
    if prompt.len() + n_steps - 1 > max {
        return Err(Error::ContextOverflow {
            len: prompt.len() + n_steps - 1,
            max,
        });
    }

    let mut ops = OpCounts::default();
    let mut tcache = target.new_cache();
    let mut dcache = draft.new_cache();
    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(n_steps);
    while out.len() < n_steps {
        let remaining = n_steps - out.len();
        let g = gamma.min(remaining - 1);

        let mut proposals = Vec::with_capacity(g);
        if g > 0 {
            let mut feed = ctx[dcache.len()..].to_vec();
            for _ in 0..g {
                let l = draft.logits(&feed, Some(&mut dcache), &mut ops)?;
                stats.draft_calls += 1;
                let next = *l.best.last().ok_or(Error::Empty("no draft logits"))?;
                proposals.push(next);
                feed = vec![next];
            }
        }

        let base = ctx.len();
        let mut feed = ctx[tcache.len()..].to_vec();
        feed.extend_from_slice(&proposals);
        let l = target.logits(&feed, Some(&mut tcache), &mut ops)?;
        stats.target_calls += 1;
        // rows for positions base-1 .. base+g-1
        let first = l.rows() - (g + 1);
        let choices = &l.best[first..];
        let k = proposals.iter().zip(choices).take_while(|(p, c)| p == c).count();
        stats.proposed += g;
        stats.accepted += k;

        ctx.extend_from_slice(&proposals[..k]);
        out.extend_from_slice(&proposals[..k]);
        let next = choices[k];
        ctx.push(next);
        out.push(next);
        // caches keep only verified context; `next` is fed on the next round
        tcache.truncate(base + k);
        dcache.truncate(base + k);
    }
    stats.acceptance_rate = if stats.proposed == 0 {
        0.0
    } else {
        stats.accepted as f64 / stats.proposed as f64
    };
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfTest {
    MaxProb,
    Entropy,
}

/// Confidence in `[0, 1]` of one logit row: the largest softmax probability,
/// or one minus the normalized entropy.
pub fn self_test(row: &[f32], kind: SelfTest) -> f64 {
    if row.len() < 2 {
        return 1.0;
    }
    let lse = log_sum_exp(row);
    let conf = match kind {
        SelfTest::MaxProb => {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            (max - lse).exp()
        }
        SelfTest::Entropy => {
            let h: f64 = row
                .iter()
                .map(|&v| {
                    let lp = v as f64 - lse;
                    let p = lp.exp();
                    if p > 0.0 {
                        -p * lp
                    } else {
                        0.0
                    }
                })
                .sum();
            1.0 - h / (row.len() as f64).ln()
        }
    };
    conf.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadePolicy {
    /// Escalate when confidence falls below this. 0 never escalates; any
    /// value above 1 always does.
    pub confidence_threshold: f64,
    pub self_test: SelfTest,
    /// Most escalations allowed per cascade run; `None` is unlimited.
    pub escalation_budget: Option<usize>,
}

impl Default for CascadePolicy {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.7,
            self_test: SelfTest::MaxProb,
            escalation_budget: None,
        }
    }
}

impl CascadePolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.confidence_threshold.is_finite() || self.confidence_threshold < 0.0 {
            return Err(Error::Invalid(format!(
                "confidence threshold {} must be finite and non-negative",
                self.confidence_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub answer: u32,
    pub escalated: bool,
    /// The small model's self-test score.
    pub confidence: f64,
}

fn last_row<M: LanguageModel + ?Sized>(model: &M, input: &[u32]) -> Result<(u32, Vec<f32>)> {
    let mut ops = OpCounts::default();
    let l = model.logits(input, None, &mut ops)?;
    let i = l.rows().checked_sub(1).ok_or(Error::Empty("no logits produced"))?;
    Ok((l.best[i], l.row(i).to_vec()))
}

/// Answer with the small model unless its confidence is below the
/// threshold, in which case the large model answers.
pub fn cascade_route<S, L>(small: &S, large: &L, input: &[u32], policy: &CascadePolicy) -> Result<Route>
where
    S: LanguageModel + ?Sized,
    L: LanguageModel + ?Sized,
{
    route(small, large, input, policy, true)
}

fn route<S, L>(small: &S, large: &L, input: &[u32], policy: &CascadePolicy, may_escalate: bool) -> Result<Route>
where
    S: LanguageModel + ?Sized,
    L: LanguageModel + ?Sized,
{
    policy.validate()?;
    check_pair(small, large)?;
    let (answer, row) = last_row(small, input)?;
    let confidence = self_test(&row, policy.self_test);
    if confidence >= policy.confidence_threshold || !may_escalate {
        return Ok(Route {
            answer,
            escalated: false,
            confidence,
        });
    }
    Ok(Route {
        answer: last_row(large, input)?.0,
        escalated: true,
        confidence,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub policy: CascadePolicy,
    pub routes: Vec<Route>,
    pub escalations: usize,
    pub escalation_rate: f64,
    /// Accuracy of the routed answers, when labels were given.
    pub accuracy: Option<f64>,
}

/// Route every input in order, spending the escalation budget first come
/// first served.
pub fn run_cascade<S, L>(
    small: &S,
    large: &L,
    inputs: &[Vec<u32>],
    labels: Option<&[u32]>,
    policy: &CascadePolicy,
) -> Result<CascadeReport>
where
    S: LanguageModel + ?Sized,
    L: LanguageModel + ?Sized,
{
    if inputs.is_empty() {
        return Err(Error::Empty("cascade input set"));
    }
    if let Some(l) = labels {
        if l.len() != inputs.len() {
            return Err(Error::Shape(format!("{} labels for {} inputs", l.len(), inputs.len())));
        }
    }
    let mut routes = Vec::with_capacity(inputs.len());
    let mut escalations = 0;
    for input in inputs {
        let may = policy.escalation_budget.is_none_or(|b| escalations < b);
        let r = route(small, large, input, policy, may)?;
        escalations += usize::from(r.escalated);
        routes.push(r);
    }
    let accuracy = labels.map(|l| {
        let hits = routes.iter().zip(l).filter(|(r, &y)| r.answer == y).count();
        hits as f64 / inputs.len() as f64
    });
    Ok(CascadeReport {
        policy: *policy,
        escalation_rate: escalations as f64 / inputs.len() as f64,
        escalations,
        routes,
        accuracy,
    })
}

/// Next-byte classification examples drawn from the held-out region:
/// `context` tokens of input, the following token as label.
pub fn toy_classification_set(corpus: &Corpus, n: usize, context: usize, seed: u64) -> Result<Vec<(Vec<u32>, u32)>> {
    let held = corpus.held_out();
    if context == 0 || held.len() <= context {
        return Err(Error::Empty("held-out region shorter than the context"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.random_range(0..held.len() - context);
            (held[start..start + context].to_vec(), held[start + context])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_test_extremes() {
        let mut one_hot = vec![-1e4f32; 16];
        one_hot[3] = 1e4;
        assert!((self_test(&one_hot, SelfTest::MaxProb) - 1.0).abs() < 1e-9);
        assert!((self_test(&one_hot, SelfTest::Entropy) - 1.0).abs() < 1e-9);
        let uniform = vec![0.5f32; 16];
        assert!((self_test(&uniform, SelfTest::MaxProb) - 1.0 / 16.0).abs() < 1e-12);
        assert!(self_test(&uniform, SelfTest::Entropy).abs() < 1e-12);
    }

    #[test]
    fn policy_validation() {
        let mut p = CascadePolicy::default();
        p.validate().unwrap();
        p.confidence_threshold = -0.1;
        assert!(p.validate().is_err());
        p.confidence_threshold = f64::NAN;
        assert!(p.validate().is_err());
    }
}

mod common;

use common::tiny_model;
use proptest::prelude::*;
use quantpipe::compress::{sensitivity_scan, Evaluator};
use quantpipe::explore::{
    dominates, enumerate_assignments, explore_exhaustive, flag_against, greedy_search, memory_footprint,
    pareto_front, select_under_constraint, Strategy as Search,
};
use quantpipe::model::{BlockId, Model, PrecisionAssignment};
use quantpipe::quant::BitWidth;
use quantpipe::{Error, Result};

/// Closed-form metric: each block adds `weight / 2^bits`.
struct Synthetic {
    model: Model,
    weights: Vec<f64>,
}

impl Synthetic {
    fn new(seed: u64) -> Self {
        let model = tiny_model(3, seed);
        let weights = (0..5).map(|i| 1.0 + ((seed as f64 + i as f64) * 1.7).sin().abs() * 40.0).collect();
        Self { model, weights }
    }
}

impl Evaluator for Synthetic {
    fn evaluate(&self, a: &PrecisionAssignment) -> Result<f64> {
        let mut m = 2.0;
        for (i, b) in self.model.block_ids().into_iter().enumerate() {
            m += self.weights[i] / (1u64 << a.get(b)?.bits()) as f64;
        }
        Ok(m)
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn corpus_fingerprint(&self) -> &str {
        "synthetic"
    }
}

fn oracle_front(points: &[(u64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|&q| dominates(q, points[i])))
        .collect()
}

fn recursive_enumeration(base: &PrecisionAssignment, blocks: &[BlockId], precisions: &[BitWidth]) -> Vec<PrecisionAssignment> {
    match blocks.split_first() {
        None => vec![base.clone()],
        Some((&b, rest)) => precisions
            .iter()
            .flat_map(|&w| recursive_enumeration(&base.clone().with(b, w), rest, precisions))
            .collect(),
    }
}

fn any_bits() -> impl Strategy<Value = BitWidth> {
    prop_oneof![
        Just(BitWidth::B2),
        Just(BitWidth::B3),
        Just(BitWidth::B4),
        Just(BitWidth::B8),
        Just(BitWidth::B16),
    ]
}

proptest! {
    #[test]
    fn front_matches_quadratic_oracle(points in prop::collection::vec((0u64..12, 0u32..12), 1..40)) {
        let pts: Vec<(u64, f64)> = points.iter().map(|&(m, q)| (m, q as f64 / 4.0)).collect();
        let front = pareto_front(&pts).unwrap();
        prop_assert_eq!(&front, &oracle_front(&pts));
        for i in 0..pts.len() {
            if !front.contains(&i) {
                prop_assert!(front.iter().any(|&f| dominates(pts[f], pts[i])));
            }
        }
    }

    #[test]
    fn footprint_matches_per_tensor_sum(bits in prop::collection::vec(any_bits(), 5), seed in 0u64..4) {
        let m = tiny_model(3, seed);
        let mut a = PrecisionAssignment::baseline(&m.config);
        for (b, &w) in m.block_ids().into_iter().zip(&bits) {
            a.set(b, w);
        }
        let mut total_bits = 0u64;
        for p in m.params() {
            if p.shape.len() == 2 {
                total_bits += p.shape.iter().product::<usize>() as u64 * a.get(p.owner).unwrap().bits() as u64;
            }
        }
        prop_assert_eq!(memory_footprint(&m, &a).unwrap(), total_bits.div_ceil(8));
    }

    #[test]
    fn selection_matches_linear_scan(max_deg in 0.0f64..0.5, seed in 0u64..50) {
        let ev = Synthetic::new(seed);
        let blocks = ev.model.block_ids();
        let report = explore_exhaustive(&ev, &blocks[..3], &[BitWidth::B2, BitWidth::B4, BitWidth::B8]).unwrap();
        let limit = report.baseline.metric * (1.0 + max_deg);
        let scan = report
            .points
            .iter()
            .filter(|p| p.metric <= limit)
            .map(|p| (p.memory_bytes, p.metric))
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
            .unwrap();
        let chosen = select_under_constraint(&report, max_deg).unwrap();
        prop_assert_eq!((chosen.memory_bytes, chosen.metric), scan);
        prop_assert!(chosen.on_front);
    }
}

#[test]
fn enumeration_matches_recursive_oracle() {
    let m = tiny_model(3, 1);
    let base = PrecisionAssignment::baseline(&m.config);
    let blocks = [BlockId::Embedding, BlockId::Transformer(0), BlockId::Transformer(2), BlockId::OutputHead];
    let p = [BitWidth::B4, BitWidth::B8];
    let got = enumerate_assignments(&base, &blocks, &p).unwrap();
    assert_eq!(got.len(), 16);
    assert_eq!(got, recursive_enumeration(&base, &blocks, &p));
    for a in &got {
        assert_eq!(a.get(BlockId::Transformer(1)).unwrap(), BitWidth::B16);
    }
    assert!(enumerate_assignments(&base, &[BlockId::Embedding, BlockId::Embedding], &p).is_err());
    assert!(enumerate_assignments(&base, &blocks, &[]).is_err());
}

#[test]
fn exhaustive_report_is_consistent() {
    let ev = Synthetic::new(3);
    let blocks = [BlockId::Transformer(0), BlockId::Transformer(1), BlockId::OutputHead];
    let p = [BitWidth::B4, BitWidth::B8, BitWidth::B16];
    let r = explore_exhaustive(&ev, &blocks, &p).unwrap();
    assert_eq!(r.strategy, Search::Exhaustive);
    assert_eq!(r.points.len(), 27);
    assert_eq!(r.baseline.memory_saving, 0.0);
    assert_eq!(r.baseline.assignment, PrecisionAssignment::baseline(&ev.model.config));
    let keys: Vec<(u64, f64)> = r.points.iter().map(|p| (p.memory_bytes, p.metric)).collect();
    let want: Vec<usize> = oracle_front(&keys);
    let flagged: Vec<usize> = (0..r.points.len()).filter(|&i| r.points[i].on_front).collect();
    assert_eq!(flagged, want);
    assert!(r.front.windows(2).all(|w| w[0].memory_bytes <= w[1].memory_bytes));
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 28);
    assert!(csv.starts_with("assignment,memory_bytes,memory_saving,metric,on_front\n"));
    let back: quantpipe::explore::ParetoReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);

    // baseline is added when the precisions leave it out
    let low = explore_exhaustive(&ev, &blocks[..1], &[BitWidth::B4]).unwrap();
    assert_eq!(low.points.len(), 2);
}

#[test]
fn greedy_walks_down_and_stays_dominated_by_exhaustive() {
    let ev = Synthetic::new(7);
    let precisions = [BitWidth::B4, BitWidth::B8];
    let profile = sensitivity_scan(&ev, &precisions).unwrap();
    let blocks = ev.model.block_ids();
    let exhaustive = explore_exhaustive(&ev, &blocks, &[BitWidth::B4, BitWidth::B8, BitWidth::B16]).unwrap();
    let mut greedy = greedy_search(&ev, &profile, &precisions, 100, None, 2).unwrap();
    assert_eq!(greedy.strategy, Search::Greedy);
    assert_eq!(greedy.points[0].assignment, PrecisionAssignment::baseline(&ev.model.config));
    // unconstrained descent ends with everything at the lowest rung
    let floor = PrecisionAssignment::uniform(&ev.model.config, BitWidth::B4);
    assert!(greedy.points.iter().any(|p| p.assignment == floor));
    // nothing greedy finds beats the exhaustive front
    for g in &greedy.front {
        assert!(!exhaustive.front.iter().any(|e| dominates((g.memory_bytes, g.metric), (e.memory_bytes, e.metric))));
    }
    let flagged = flag_against(&mut greedy, &exhaustive.front);
    assert_eq!(flagged, greedy.front.iter().filter(|p| p.dominated_by.is_some()).count());
    for p in greedy.front.iter().filter(|p| p.dominated_by.is_none()) {
        assert!(exhaustive.front.iter().any(|e| (e.memory_bytes, e.metric) == (p.memory_bytes, p.metric)));
    }
}

#[test]
fn greedy_respects_budget_and_floor() {
    let ev = Synthetic::new(11);
    let precisions = [BitWidth::B2, BitWidth::B4, BitWidth::B8];
    let profile = sensitivity_scan(&ev, &precisions).unwrap();
    let only_base = greedy_search(&ev, &profile, &precisions, 0, None, 3).unwrap();
    assert_eq!(only_base.points.len(), 1);
    let one = greedy_search(&ev, &profile, &precisions, 1, None, 1).unwrap();
    assert_eq!(one.points.len(), 2);

    let d = 0.05;
    let r = greedy_search(&ev, &profile, &precisions, 100, Some(d), 5).unwrap();
    let limit = r.baseline.metric * (1.0 + d);
    let sel = select_under_constraint(&r, d).unwrap();
    assert!(sel.metric <= limit);
    assert!(sel.memory_bytes < r.baseline_bytes);
    assert!(matches!(select_under_constraint(&only_base, -0.5), Err(Error::Unsatisfiable { .. })));
}

#[test]
fn greedy_rejects_profile_from_another_slice() {
    let ev = Synthetic::new(1);
    let mut profile = sensitivity_scan(&ev, &[BitWidth::B8]).unwrap();
    profile.corpus_fingerprint = "elsewhere".into();
    assert!(greedy_search(&ev, &profile, &[BitWidth::B8], 4, None, 1).is_err());
}

#[test]
fn front_rejects_nan_and_empty() {
    assert!(pareto_front(&[]).is_err());
    assert!(pareto_front(&[(1, f64::NAN)]).is_err());
}

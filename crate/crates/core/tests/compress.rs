mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{random_seqs, tiny_model};
use proptest::prelude::*;
use quantpipe::compress::{
    apply_assignment, prune_mlp_channels, quantize_block, remove_blocks, sensitivity_scan, token_drop,
    FakeQuantEvaluator, StructuralPlan,
};
use quantpipe::model::{BlockId, LanguageModel, Model, OpCounts, PrecisionAssignment, TokenDrop};
use quantpipe::quant::BitWidth;
use quantpipe::Error;

fn any_block(n_blocks: usize) -> impl Strategy<Value = BlockId> {
    prop_oneof![
        Just(BlockId::Embedding),
        Just(BlockId::OutputHead),
        (0..n_blocks).prop_map(BlockId::Transformer),
    ]
}

fn low_bits() -> impl Strategy<Value = BitWidth> {
    prop_oneof![Just(BitWidth::B2), Just(BitWidth::B3), Just(BitWidth::B4), Just(BitWidth::B8)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantizing_a_block_touches_only_that_block(block in any_block(3), bits in low_bits(), seed in any::<u64>()) {
        let m = tiny_model(3, seed);
        let q = quantize_block(&m, block, bits).unwrap();
        for other in m.block_ids() {
            if other != block {
                prop_assert_eq!(q.block_bytes(other), m.block_bytes(other));
            }
        }
        prop_assert_ne!(q.block_bytes(block), m.block_bytes(block));
        // quantizing again is a no-op
        prop_assert_eq!(quantize_block(&q, block, bits).unwrap(), q);
    }

    #[test]
    fn block_quantization_commutes(a in any_block(3), b in any_block(3), wa in low_bits(), wb in low_bits(), seed in any::<u64>()) {
        prop_assume!(a != b);
        let m = tiny_model(3, seed);
        let ab = quantize_block(&quantize_block(&m, a, wa).unwrap(), b, wb).unwrap();
        let ba = quantize_block(&quantize_block(&m, b, wb).unwrap(), a, wa).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn pruning_keeps_the_strongest_channels(keep in 1usize..=32, seed in any::<u64>()) {
        let m = tiny_model(2, seed);
        let p = prune_mlp_channels(&m, 1, keep).unwrap();
        prop_assert_eq!(p.blocks[1].ff_width(), keep);
        prop_assert_eq!(p.blocks[0].ff_width(), 32);
        let removed = (32 - keep) * (2 * 16 + usize::from(m.blocks[1].fc1.bias.is_some()));
        prop_assert_eq!(m.param_count() - p.param_count(), removed);
        // every kept channel is at least as strong as every removed one
        let norm = |m: &Model, c: usize| -> f64 {
            let b = &m.blocks[1];
            let ff = b.ff_width();
            b.fc1.row(c).iter().map(|&w| (w as f64).powi(2)).sum::<f64>()
                + (0..16).map(|o| (b.fc2.weight[o * ff + c] as f64).powi(2)).sum::<f64>()
        };
        let kept: Vec<f64> = (0..keep).map(|c| norm(&p, c)).collect();
        let mut all: Vec<f64> = (0..32).map(|c| norm(&m, c)).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let weakest_kept = kept.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(weakest_kept >= all[keep - 1] - 1e-12);
    }

    #[test]
    fn plan_json_round_trips(
        removed in prop::collection::btree_set(0usize..6, 0..3),
        kept in prop::collection::btree_map(0usize..6, 1usize..64, 0..3),
        kf in 0.01f64..=1.0,
        after in 0usize..6,
        with_drop in any::<bool>(),
    ) {
        let plan = StructuralPlan {
            blocks_removed: removed,
            mlp_channels_kept: kept,
            token_drop: with_drop.then_some(TokenDrop { after_block: after, keep_fraction: kf }),
        };
        let json = serde_json::to_string(&plan).unwrap();
        prop_assert_eq!(serde_json::from_str::<StructuralPlan>(&json).unwrap(), plan);
    }
}

#[test]
fn sixteen_bits_and_empty_plans_are_identities() {
    let m = tiny_model(3, 1);
    for b in m.block_ids() {
        assert_eq!(quantize_block(&m, b, BitWidth::B16).unwrap(), m);
    }
    assert_eq!(apply_assignment(&m, &PrecisionAssignment::baseline(&m.config)).unwrap(), m);
    assert_eq!(StructuralPlan::default().apply(&m).unwrap(), m);
    assert!(StructuralPlan::default().is_empty());
    assert_eq!(remove_blocks(&m, &BTreeSet::new()).unwrap(), m);
    assert_eq!(prune_mlp_channels(&m, 0, 32).unwrap(), m);
    assert_eq!(token_drop(&m, 1.0, 1).unwrap(), m);
}

#[test]
fn zero_channels_prune_without_changing_outputs() {
    let mut m = tiny_model(2, 2);
    let ff = 32;
    for c in [3, 10, 31] {
        m.blocks[0].fc1.weight[c * 16..(c + 1) * 16].fill(0.0);
        for o in 0..16 {
            m.blocks[0].fc2.weight[o * ff + c] = 0.0;
        }
    }
    let p = prune_mlp_channels(&m, 0, ff - 3).unwrap();
    let seq = &random_seqs(1, 20, 32, 3)[0];
    let a = m.logits(seq, None, &mut OpCounts::default()).unwrap();
    let b = p.logits(seq, None, &mut OpCounts::default()).unwrap();
    assert_eq!(a.best, b.best);
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-4);
    }
}

#[test]
fn removing_blocks_shrinks_the_model() {
    let mut m = tiny_model(4, 4);
    m.set_token_drop(Some(TokenDrop { after_block: 3, keep_fraction: 0.5 })).unwrap();
    let r = remove_blocks(&m, &BTreeSet::from([0, 2])).unwrap();
    assert_eq!(r.config.n_blocks, 2);
    assert_eq!(r.blocks, vec![m.blocks[1].clone(), m.blocks[3].clone()]);
    assert_eq!(r.token_drop.unwrap().after_block, 1);
    assert_eq!(
        m.param_count() - r.param_count(),
        m.block_param_count(BlockId::Transformer(0)) + m.block_param_count(BlockId::Transformer(2))
    );
    assert!(matches!(remove_blocks(&m, &BTreeSet::from([4])), Err(Error::UnknownBlock(_))));
    assert!(remove_blocks(&m, &BTreeSet::from([0, 1, 2, 3])).is_err());
    assert!(remove_blocks(&m, &BTreeSet::from([3])).is_err());
}

#[test]
fn plan_indices_refer_to_the_original_model() {
    let m = tiny_model(4, 5);
    let plan = StructuralPlan {
        blocks_removed: BTreeSet::from([1]),
        mlp_channels_kept: BTreeMap::from([(2, 8)]),
        token_drop: Some(TokenDrop { after_block: 3, keep_fraction: 0.5 }),
    };
    let out = plan.apply(&m).unwrap();
    assert_eq!(out.config.n_blocks, 3);
    assert_eq!(out.blocks[1].ff_width(), 8);
    assert_eq!(out.token_drop, Some(TokenDrop { after_block: 2, keep_fraction: 0.5 }));

    let clash = StructuralPlan {
        blocks_removed: BTreeSet::from([3]),
        token_drop: Some(TokenDrop { after_block: 3, keep_fraction: 0.5 }),
        ..Default::default()
    };
    assert!(clash.apply(&m).is_err());
    assert!(serde_json::from_str::<StructuralPlan>(r#"{"blocks_removed":[1],"extra":0}"#).is_err());
}

#[test]
fn invalid_compression_arguments() {
    let m = tiny_model(2, 6);
    assert!(prune_mlp_channels(&m, 0, 0).is_err());
    assert!(prune_mlp_channels(&m, 0, 33).is_err());
    assert!(prune_mlp_channels(&m, 2, 4).is_err());
    assert!(quantize_block(&m, BlockId::Transformer(5), BitWidth::B4).is_err());
    assert!(token_drop(&m, 0.0, 0).is_err());
    assert!(token_drop(&m, 0.5, 2).is_err());
    let partial = PrecisionAssignment::from_map(BTreeMap::from([(BlockId::Embedding, BitWidth::B8)]));
    assert!(matches!(apply_assignment(&m, &partial), Err(Error::MissingBlock(_))));
}

#[test]
fn scan_covers_the_grid_in_order() {
    let m = tiny_model(2, 7);
    let ev = FakeQuantEvaluator::new(&m, random_seqs(3, 16, 32, 8));
    let p = sensitivity_scan(&ev, &[BitWidth::B8, BitWidth::B2, BitWidth::B4]).unwrap();
    assert_eq!(p.precisions, vec![BitWidth::B2, BitWidth::B4, BitWidth::B8, BitWidth::B16]);
    assert_eq!(p.entries.len(), 4 * 4);
    let keys: Vec<_> = p.entries.iter().map(|e| (e.block, e.bits)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for e in &p.entries {
        assert_eq!(e.delta, e.metric - p.baseline_metric);
        if e.bits == BitWidth::B16 {
            assert_eq!(e.delta, 0.0);
        }
    }
    let again = sensitivity_scan(&ev, &[BitWidth::B4, BitWidth::B2, BitWidth::B8, BitWidth::B4]).unwrap();
    assert_eq!(again, p);
    let json = p.to_json().unwrap();
    assert_eq!(serde_json::from_str::<quantpipe::compress::SensitivityProfile>(&json).unwrap(), p);
    assert!(sensitivity_scan(&ev, &[]).is_err());
}

#[test]
fn scan_entries_match_direct_evaluation() {
    let m = tiny_model(1, 9);
    let slice = random_seqs(2, 12, 32, 10);
    let ev = FakeQuantEvaluator::new(&m, slice.clone());
    let p = sensitivity_scan(&ev, &[BitWidth::B3]).unwrap();
    let direct = quantpipe::eval::perplexity(&quantize_block(&m, BlockId::OutputHead, BitWidth::B3).unwrap(), &slice).unwrap();
    assert_eq!(p.get(BlockId::OutputHead, BitWidth::B3).unwrap().metric, direct);
}

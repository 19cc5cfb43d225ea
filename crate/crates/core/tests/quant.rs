use proptest::prelude::*;
use quantpipe::quant::{
    compute_qparams, dequantize, encode_multiplier, fake_quantize, quantize, requantize_value, BitWidth,
    Granularity, QuantParams,
};

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
    fn codes_stay_in_range(values in prop::collection::vec(-1e3f32..1e3, 1..64), bits in any_bits(), sym in any::<bool>()) {
        let q = compute_qparams(&values, &[values.len()], bits, sym, Granularity::PerTensor).unwrap();
        let t = quantize(&values, &[values.len()], &q).unwrap();
        prop_assert!(t.data().iter().all(|&c| c >= bits.qmin() && c <= bits.qmax()));
    }

    #[test]
    fn round_trip_within_half_step(values in prop::collection::vec(-50f32..50.0, 1..64), bits in any_bits(), sym in any::<bool>()) {
        let q = compute_qparams(&values, &[values.len()], bits, sym, Granularity::PerTensor).unwrap()[0];
        let back = fake_quantize(&values, &[values.len()], &[q]).unwrap();
        for (v, b) in values.iter().zip(&back) {
            prop_assert!(((v - b).abs() as f64) <= q.scale / 2.0 + 1e-5 * (1.0 + v.abs() as f64), "{} -> {}", v, b);
        }
    }

    #[test]
    fn range_contains_zero_and_data(lo in -100f64..100.0, span in 0f64..100.0, bits in any_bits(), sym in any::<bool>()) {
        let q = QuantParams::from_range(lo, lo + span, bits, sym).unwrap();
        let (a, b) = q.representable_range();
        prop_assert!(a <= 0.0 && b >= 0.0);
        prop_assert!(a <= lo.min(0.0) + q.scale && b >= (lo + span).max(0.0) - q.scale);
        prop_assert_eq!(q.quantize_value(0.0), q.zero_point);
    }

    #[test]
    fn per_channel_rows_are_independent(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q = compute_qparams(&values, &[rows, cols], BitWidth::B4, true, Granularity::PerOutputChannel).unwrap();
        prop_assert_eq!(q.len(), rows);
        let whole = fake_quantize(&values, &[rows, cols], &q).unwrap();
        for r in 0..rows {
            let row = &values[r * cols..(r + 1) * cols];
            let own = compute_qparams(row, &[1, cols], BitWidth::B4, true, Granularity::PerOutputChannel).unwrap();
            prop_assert_eq!(&whole[r * cols..(r + 1) * cols], &fake_quantize(row, &[1, cols], &own).unwrap()[..]);
        }
    }

    #[test]
    fn multiplier_encoding_is_tight(m in 1e-12f64..=1.0) {
        let e = encode_multiplier(m).unwrap();
        prop_assert!(((e.decode() - m) / m).abs() <= 2f64.powi(-30));
    }

    #[test]
    fn requantize_matches_real_rounding(acc in any::<i32>(), m in 1e-9f64..=1.0, zp in -100i32..100) {
        let e = encode_multiplier(m).unwrap();
        let got = requantize_value(acc, e, BitWidth::B8, zp);
        let want = ((acc as f64 * m).round() + zp as f64).clamp(-128.0, 127.0);
        prop_assert!((got as f64 - want).abs() <= 1.0, "acc {} m {}: {} vs {}", acc, m, got, want);
    }

    #[test]
    fn dequantize_is_affine(codes in prop::collection::vec(-128i32..=127, 1..32), scale in 1e-4f64..10.0, zp in -128i32..=127) {
        let q = QuantParams::new(scale, zp, BitWidth::B8, false).unwrap();
        let t = quantpipe::quant::IntTensor::new(vec![codes.len()], codes.clone(), vec![q]).unwrap();
        for (c, v) in codes.iter().zip(dequantize(&t)) {
            prop_assert_eq!(v, ((c - zp) as f64 * scale) as f32);
        }
    }
}

#[test]
fn sixteen_bit_is_finer_than_eight() {
    let values: Vec<f32> = (0..200).map(|i| (i as f32 * 0.731).sin() * 3.0).collect();
    let err = |bits| {
        let q = compute_qparams(&values, &[200], bits, true, Granularity::PerTensor).unwrap();
        let back = fake_quantize(&values, &[200], &q).unwrap();
        values.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
    };
    assert!(err(BitWidth::B16) < err(BitWidth::B8));
    assert!(err(BitWidth::B8) < err(BitWidth::B4));
    assert!(err(BitWidth::B4) < err(BitWidth::B2));
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(compute_qparams(&[], &[0], BitWidth::B8, true, Granularity::PerTensor).is_err());
    assert!(compute_qparams(&[1.0, 2.0], &[3], BitWidth::B8, true, Granularity::PerTensor).is_err());
    assert!(QuantParams::from_range(f64::NAN, 1.0, BitWidth::B8, false).is_err());
    assert!(QuantParams::new(0.0, 0, BitWidth::B8, false).is_err());
    assert!(QuantParams::new(1.0, 3, BitWidth::B8, true).is_err());
    assert!(QuantParams::new(1.0, 200, BitWidth::B8, false).is_err());
    assert!(BitWidth::try_from(5).is_err());
}

use proptest::prelude::*;
use rfx_core::proximity::{dequantize, nf4_max_gap, quantize, QuantMode, NF4_BLOCK, NF4_CODEBOOK};

fn absmax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Enumerated independently of the library's helper.
fn codebook_gap() -> f64 {
    let mut gap: f64 = 0.0;
    for k in 1..16 {
        gap = gap.max(NF4_CODEBOOK[k] - NF4_CODEBOOK[k - 1]);
    }
    gap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn int8_error_within_scale(values in prop::collection::vec(-3.0f64..3.0, 1..300)) {
        let q = quantize(&values, QuantMode::I8).unwrap();
        let d = dequantize(&q);
        prop_assert!(max_err(&values, &d) <= absmax(&values) / 127.0);
    }

    #[test]
    fn nf4_error_within_half_gap_per_block(values in prop::collection::vec(-2.0f64..2.0, 1..300)) {
        let q = quantize(&values, QuantMode::Nf4).unwrap();
        let d = dequantize(&q);
        for (block, dec) in values.chunks(NF4_BLOCK).zip(d.chunks(NF4_BLOCK)) {
            let bound = absmax(block) * codebook_gap() / 2.0;
            prop_assert!(max_err(block, dec) <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn f16_error_is_half_ulp(values in prop::collection::vec(-1.0f64..1.0, 1..200)) {
        let d = dequantize(&quantize(&values, QuantMode::F16).unwrap());
        for (x, y) in values.iter().zip(&d) {
            prop_assert!((x - y).abs() <= x.abs() * 2f64.powi(-11) + 2f64.powi(-25));
        }
    }

    #[test]
    fn f32_error_is_half_ulp(values in prop::collection::vec(-1.0f64..1.0, 1..200)) {
        let d = dequantize(&quantize(&values, QuantMode::F32).unwrap());
        for (x, y) in values.iter().zip(&d) {
            prop_assert!((x - y).abs() <= x.abs() * 2f64.powi(-24) + 1e-45);
        }
    }

    #[test]
    fn constant_blocks_decode_within_one_gap(v in -5.0f64..5.0, len in 1usize..150) {
        let values = vec![v; len];
        let d = dequantize(&quantize(&values, QuantMode::Nf4).unwrap());
        prop_assert!(max_err(&values, &d) <= v.abs() * codebook_gap());
    }
}

#[test]
fn library_gap_agrees_with_enumeration() {
    assert_eq!(nf4_max_gap(), codebook_gap());
}

#[test]
fn zero_blocks_decode_to_zero_in_every_mode() {
    for mode in [
        QuantMode::F32,
        QuantMode::F16,
        QuantMode::I8,
        QuantMode::Nf4,
    ] {
        for len in [1, 63, 64, 65, 200] {
            let d = dequantize(&quantize(&vec![0.0; len], mode).unwrap());
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn non_finite_input_rejected() {
    assert!(quantize(&[1.0, f64::NAN], QuantMode::I8).is_err());
    assert!(quantize(&[f64::INFINITY], QuantMode::Nf4).is_err());
}

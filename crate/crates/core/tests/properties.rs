//! Cross-module properties of the quantization pipeline, checked over
//! randomized inputs.

use std::io::Cursor;

use mxfp4::container::{read_dense, read_quantized, write_dense, write_quantized};
use mxfp4::diagnostics::quant_confidence;
use mxfp4::{
    bracket, quantize_block, quantize_matrix, DetRng, Fp4Format, GroupAxis, Matrix, QuantStream,
    Rounding, ScaleRule,
};
use proptest::prelude::*;

/// A finite f64 with magnitude up to ~8.5e37 (2^126), far below the point
/// where the +127 scale clamp would have to truncate, or exactly zero.
fn element() -> impl Strategy<Value = f64> {
    let nonzero = (any::<bool>(), -320i32..=126, 1.0f64..2.0).prop_map(|(neg, exp, mant)| {
        let v = mant * f64::powi(2.0, exp);
        if neg {
            -v
        } else {
            v
        }
    });
    prop_oneof![1 => Just(0.0), 15 => nonzero]
}

fn block_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(element(), 1..=32)
}

fn formats() -> impl Strategy<Value = Fp4Format> {
    prop_oneof![Just(Fp4Format::E2M1), Just(Fp4Format::E3M0)]
}

fn rules() -> impl Strategy<Value = ScaleRule> {
    prop_oneof![Just(ScaleRule::TruncationFree), Just(ScaleRule::Microscaling)]
}

proptest! {
    /// The truncation-free rule keeps every latent within [Qn, Qp]: nothing
    /// saturates under deterministic rounding, and stochastic rounding
    /// (which rejects out-of-range input) always succeeds.
    #[test]
    fn truncation_free_never_saturates(values in block_values(), fmt in formats(), seed in any::<u64>()) {
        let mut rng = DetRng::new(seed);
        let block = quantize_block(&values, fmt, ScaleRule::TruncationFree, Rounding::Stochastic, &mut rng)
            .expect("stochastic rounding must stay in range under this rule");
        let s = block.scale().value();
        for &v in &values {
            let latent = v / s;
            prop_assert!(latent.abs() <= fmt.q_pos(), "latent {latent} out of range (v={v}, s={s})");
        }
    }

    /// Any finite block quantizes under every rule/rounding combination
    /// (the floor rule saturates overshooting latents instead of failing).
    #[test]
    fn quantization_totality(values in block_values(), fmt in formats(), rule in rules(), seed in any::<u64>()) {
        for rounding in [Rounding::Deterministic, Rounding::Stochastic] {
            let mut rng = DetRng::new(seed);
            let block = quantize_block(&values, fmt, rule, rounding, &mut rng).unwrap();
            let grid = fmt.grid();
            let s = block.scale().value();
            for i in 0..values.len() {
                let code_value = block.value(i) / s;
                prop_assert!(grid.contains(&code_value));
            }
        }
    }

    /// Quantize -> dequantize -> quantize (deterministic) reproduces the
    /// dequantized values exactly: reconstructions are fixed points.
    #[test]
    fn deterministic_requantization_is_exact(values in block_values(), fmt in formats(), rule in rules()) {
        let mut rng = DetRng::new(0);
        let once = quantize_block(&values, fmt, rule, Rounding::Deterministic, &mut rng).unwrap();
        let recon = once.dequantize();
        let twice = quantize_block(&recon, fmt, rule, Rounding::Deterministic, &mut rng).unwrap();
        prop_assert_eq!(&recon, &twice.dequantize());
    }

    /// Stochastic rounding of an exact reconstruction is also exact: values
    /// already on the grid leave nothing to randomize.
    #[test]
    fn stochastic_requantization_of_reconstructions_is_exact(
        values in block_values(), fmt in formats(), seed in any::<u64>()
    ) {
        let mut rng = DetRng::new(seed);
        let once = quantize_block(&values, fmt, ScaleRule::TruncationFree, Rounding::Deterministic, &mut rng).unwrap();
        let recon = once.dequantize();
        let again = quantize_block(&recon, fmt, ScaleRule::TruncationFree, Rounding::Stochastic, &mut rng).unwrap();
        prop_assert_eq!(&recon, &again.dequantize());
    }

    /// Deterministic rounding agrees with the brute-force nearest grid
    /// value (ties to the upper one).
    #[test]
    fn nearest_matches_brute_force(x in -8.0f64..8.0, fmt in formats()) {
        let got = mxfp4::round_deterministic(x, fmt).unwrap();
        let clamped = x.clamp(fmt.q_neg(), fmt.q_pos());
        // Ascending scan with <= keeps the last (upper) value on ties.
        let grid = fmt.grid();
        let mut best = grid[0];
        for &g in grid.iter() {
            if (clamped - g).abs() <= (clamped - best).abs() {
                best = g;
            }
        }
        prop_assert_eq!(got, best);
    }

    /// Stochastic rounding only ever returns the two bracketing values.
    #[test]
    fn stochastic_stays_in_the_bracket(x in -6.0f64..=6.0, seed in any::<u64>()) {
        let fmt = Fp4Format::E2M1;
        let (q1, q2) = bracket(x, fmt).unwrap();
        let mut rng = DetRng::new(seed);
        for _ in 0..8 {
            let r = mxfp4::round_stochastic(x, fmt, &mut rng).unwrap();
            prop_assert!(r == q1 || r == q2);
        }
    }

    /// Growing a block's magnitude never shrinks its scale exponent.
    #[test]
    fn scale_is_monotone_in_magnitude(m1 in 1e-300f64..1e30, factor in 1.0f64..1e8, rule in rules()) {
        let m2 = m1 * factor;
        let fmt = Fp4Format::E2M1;
        let s1 = mxfp4::compute_scale(&[m1], fmt, rule).unwrap();
        let s2 = mxfp4::compute_scale(&[m2], fmt, rule).unwrap();
        prop_assert!(s2.exponent() >= s1.exponent());
    }

    /// Block wire images survive a round trip.
    #[test]
    fn block_wire_round_trip(values in block_values(), fmt in formats(), rule in rules(), seed in any::<u64>()) {
        let mut rng = DetRng::new(seed);
        let block = quantize_block(&values, fmt, rule, Rounding::Stochastic, &mut rng).unwrap();
        let wire = block.to_wire();
        let back = mxfp4::MxBlock::from_wire(&wire, block.len(), fmt).unwrap();
        prop_assert_eq!(block, back);
    }

    /// Quantized containers survive a round trip for arbitrary shapes,
    /// axes, formats, and rules.
    #[test]
    fn container_round_trip(
        rows in 1usize..48,
        cols in 1usize..48,
        col_axis in any::<bool>(),
        fmt in formats(),
        rule in rules(),
        seed in any::<u64>(),
    ) {
        let mut rng = DetRng::new(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.uniform(-30.0, 30.0));
        let axis = if col_axis { GroupAxis::ColGroups } else { GroupAxis::RowGroups };
        let q = quantize_matrix(&m, axis, fmt, rule, Rounding::Deterministic, &QuantStream::new(seed, 0, 0)).unwrap();
        let mut buf = Vec::new();
        write_quantized(&mut buf, &q).unwrap();
        let back = read_quantized(&mut Cursor::new(&buf)).unwrap();
        prop_assert_eq!(q, back);
    }

    /// Dense containers are bit-exact through a round trip.
    #[test]
    fn dense_round_trip(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let mut rng = DetRng::new(seed);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.normal() * 1e3);
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();
        let back = read_dense(&mut Cursor::new(&buf)).unwrap();
        prop_assert_eq!(m, back);
    }

    /// Matrix quantization is a pure function of (tensor data, stream).
    #[test]
    fn matrix_quantization_is_deterministic(seed in any::<u64>(), step in any::<u64>()) {
        let mut rng = DetRng::new(seed ^ 0xABCD);
        let m = Matrix::from_fn(7, 40, |_, _| rng.uniform(-4.0, 4.0));
        let stream = QuantStream::new(seed, 3, step);
        let a = quantize_matrix(&m, GroupAxis::RowGroups, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Stochastic, &stream).unwrap();
        let b = quantize_matrix(&m, GroupAxis::RowGroups, Fp4Format::E2M1, ScaleRule::TruncationFree, Rounding::Stochastic, &stream).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Confidence is a well-defined value in [0, 1] across the whole latent
/// range, densely sampled.
#[test]
fn quant_confidence_unit_interval_dense_sweep() {
    let mut rng = DetRng::new(2024);
    for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
        let qp = fmt.q_pos();
        for _ in 0..500_000 {
            let latent = rng.uniform(-qp, qp);
            let c = quant_confidence(latent, fmt).unwrap();
            assert!((0.0..=1.0).contains(&c), "latent {latent} gave confidence {c}");
        }
        // The edges themselves.
        for latent in [-qp, qp] {
            let c = quant_confidence(latent, fmt).unwrap();
            assert_eq!(c, 1.0);
        }
    }
}

/// Every threshold of both formats yields confidence exactly zero.
#[test]
fn quant_confidence_vanishes_on_thresholds() {
    for fmt in [Fp4Format::E2M1, Fp4Format::E3M0] {
        for &t in fmt.thresholds() {
            assert_eq!(quant_confidence(t, fmt).unwrap(), 0.0, "threshold {t}");
        }
    }
}

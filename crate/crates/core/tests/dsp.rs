mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use srcverify::corpus::Waveform;
use srcverify::splicing::{
    detect_minima, gaussian_smooth, splice_report, window_pair_count, window_pairs, Decision,
    ScoreSequence, SpliceScanConfig,
};

#[test]
fn smoothing_matches_padded_convolution() {
    let mut r = rng(1);
    for _ in 0..100 {
        let n = r.random_range(1..80);
        let seq: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let sigma = if r.random_bool(0.5) { 1.7 } else { r.random_range(0.3..6.0) };
        let got = gaussian_smooth(&seq, sigma).unwrap();
        let expected = smooth_oracle(&seq, sigma);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-9, "n {n} sigma {sigma}");
        }
    }
}

#[test]
fn minima_match_brute_force() {
    let mut r = rng(2);
    for _ in 0..200 {
        let seq = random_sequence(&mut r, 60);
        let depth = r.random_range(0.0..0.6);
        let width = r.random_range(1..6);
        let got: Vec<(usize, f64, usize)> = detect_minima(&seq, depth, width)
            .into_iter()
            .map(|m| (m.index, m.depth, m.width))
            .collect();
        assert_eq!(got, minima_oracle(&seq, depth, width), "{seq:?}");
    }
}

#[test]
fn v_shape_has_one_minimum_of_depth_point_eight() {
    let v: Vec<f64> = (0..9).map(|i| 0.2 + 0.2 * (i as f64 - 4.0).abs()).collect();
    let m = detect_minima(&v, 0.38, 3);
    assert_eq!(m.len(), 1);
    assert!((m[0].depth - 0.8).abs() < 1e-12);
    let oracle = minima_oracle(&v, 0.38, 3);
    assert_eq!(oracle.len(), 1);
    assert_eq!(oracle[0].1, m[0].depth);
}

#[test]
fn twin_valleys_have_equal_depths() {
    let valley = [1.0, 0.7, 0.4, 0.1, 0.4, 0.7];
    let mut seq: Vec<f64> = valley.to_vec();
    seq.extend([1.0; 4]);
    seq.extend(valley);
    seq.push(1.0);
    let m = detect_minima(&seq, 0.38, 1);
    assert_eq!(m.len(), 2);
    assert_eq!(m[0].depth, m[1].depth);
    assert_eq!(m, detect_minima(&seq, 0.38, 1));
}

#[test]
fn window_counts_match_stepping() {
    let cfg = SpliceScanConfig::default();
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.random_range(16000..200000);
        let expected = window_count_oracle(n, 8000, 800);
        assert_eq!(window_pair_count(n, cfg.window_len(), cfg.stride()), expected);
        if n < 40000 {
            let w = Waveform::new(vec![0.1; n]).unwrap();
            assert_eq!(window_pairs(&w, "t", &cfg).unwrap().len(), expected);
        }
    }
    assert_eq!(window_pair_count(5 * 16000, 8000, 800), 81);
    assert_eq!(window_pair_count(16000, 8000, 800), 1);
}

proptest! {
    #[test]
    fn smoothing_is_linear_and_bounded(
        pairs in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 1..50),
        alpha in -3.0f64..3.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let sa = gaussian_smooth(&a, 1.7).unwrap();
        let sb = gaussian_smooth(&b, 1.7).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let sc = gaussian_smooth(&combo, 1.7).unwrap();
        for i in 0..a.len() {
            prop_assert!((sc[i] - (alpha * sa[i] + sb[i])).abs() < 1e-9);
        }
        let (lo, hi) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(sa.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn minima_ignore_constant_offsets(seed in 0u64..10_000, offset in -5i32..5) {
        let mut r = rng(seed);
        // Eighths keep every sum and half-difference exact, so no tie can round differently.
        let seq: Vec<f64> = random_sequence(&mut r, 60).iter().map(|v| (v * 8.0).round() / 8.0).collect();
        let shifted: Vec<f64> = seq.iter().map(|v| v + offset as f64).collect();
        let a = detect_minima(&seq, 0.1, 2);
        let b = detect_minima(&shifted, 0.1, 2);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.index, y.index);
            prop_assert_eq!(x.width, y.width);
            prop_assert_eq!(x.depth, y.depth);
        }
    }

    #[test]
    fn reported_minima_pass_both_gates(seed in 0u64..10_000, depth in 0.0f64..0.8, width in 1usize..6) {
        let mut r = rng(seed);
        let seq = random_sequence(&mut r, 60);
        for m in detect_minima(&seq, depth, width) {
            prop_assert!(m.depth >= depth && m.width >= width);
        }
    }

    #[test]
    fn window_count_formula_holds(n in 16000usize..400_000) {
        prop_assert_eq!(window_pair_count(n, 8000, 800), window_count_oracle(n, 8000, 800));
    }

    #[test]
    fn decision_is_monotone_in_threshold(seed in 0u64..10_000, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let cfg = SpliceScanConfig { min_depth: 0.1, ..SpliceScanConfig::default() };
        let mut r = rng(seed);
        let raw: Vec<f64> = (0..40).map(|_| r.random()).collect();
        let seq = ScoreSequence::from_raw(raw, &cfg).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let spliced = |t| splice_report(&seq, &cfg, t).decision == Decision::Spliced;
        prop_assert!(spliced(lo) || !spliced(hi));
    }
}

use kf_dmd::experiments::{eigenvalue_distance, pearson};
use kf_dmd::report::format_float;
use kf_dmd::spectral::SpectralParams;
use ndarray::Array1;
use ndarray_linalg::types::c64;
use proptest::prelude::*;

fn finite_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e12..1e12f64,
        -1.0..1.0f64,
        Just(0.0),
        Just(-0.0),
        Just(1e-300),
        Just(-1e300),
    ]
}

fn flat_state() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..4usize, 1..6usize).prop_flat_map(|(r, d)| {
        let len = 2 * r * (d + 2);
        (Just(r), Just(d), prop::collection::vec(finite_value(), len))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn unflatten_flatten_roundtrip((r, d, theta) in flat_state()) {
        let arr = Array1::from_vec(theta.clone());
        let params = SpectralParams::unflatten(arr.view(), r, d).unwrap();
        prop_assert_eq!(params.rank(), r);
        prop_assert_eq!(params.dim(), d);
        let back = params.flatten();
        // bitwise round trip, so filter states survive flatten/unflatten exactly
        for (a, b) in theta.iter().zip(back.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flatten_length_matches((r, d, theta) in flat_state()) {
        let arr = Array1::from_vec(theta);
        let params = SpectralParams::unflatten(arr.view(), r, d).unwrap();
        prop_assert_eq!(params.flat_len(), 2 * r * (d + 2));
        prop_assert_eq!(params.flatten().len(), params.flat_len());
    }

    #[test]
    fn format_float_parses_back(v in finite_value()) {
        let s = format_float(v);
        let parsed: f64 = s.parse().unwrap();
        prop_assert_eq!(parsed.to_bits(), v.to_bits());
    }

    #[test]
    fn eigenvalue_distance_self_is_zero(parts in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..8)) {
        let eigs: Vec<c64> = parts.iter().map(|&(re, im)| c64::new(re, im)).collect();
        let est = Array1::from_vec(eigs.clone());
        prop_assert!(eigenvalue_distance(&est, &eigs) <= 1e-12);
    }

    #[test]
    fn eigenvalue_distance_permutation_invariant(
        parts in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 2..8),
        shift in 1..7usize,
    ) {
        let eigs: Vec<c64> = parts.iter().map(|&(re, im)| c64::new(re, im)).collect();
        let mut rotated = eigs.clone();
        rotated.rotate_left(shift % eigs.len());
        let est = Array1::from_vec(eigs.clone());
        let a = eigenvalue_distance(&est, &eigs);
        let b = eigenvalue_distance(&est, &rotated);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn pearson_affine_images(
        xs in prop::collection::vec(-100.0..100.0f64, 3..50),
        scale in 0.1..10.0f64,
        offset in -50.0..50.0f64,
    ) {
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let up: Vec<f64> = xs.iter().map(|x| scale * x + offset).collect();
        let down: Vec<f64> = xs.iter().map(|x| -scale * x + offset).collect();
        prop_assert!((pearson(&xs, &up) - 1.0).abs() < 1e-8);
        prop_assert!((pearson(&xs, &down) + 1.0).abs() < 1e-8);
    }
}

//! Property tests for the module invariants.

mod common;

use common::{orthogonality_residual, rel_frobenius};
use proptest::prelude::*;
use vkd_core::distill::{cross_corr, kernel_preservation_error, l2_distill_loss};
use vkd_core::io::{decode_features, encode_features};
use vkd_core::linalg::{det, expm, expm_frechet, matmul};
use vkd_core::normalizer::{layer_norm, standardize};
use vkd_core::projector::{build_projection, skew, OrthoMethod, SkewParam};
use vkd_core::Matrix;

/// Strategy: matrix of the given shape with entries in [-1, 1].
fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

/// Strategy: skew parameter scaled so ||a||_1 <= 10.
fn skew_param(d_s: usize, d_t: usize) -> impl Strategy<Value = SkewParam> {
    (matrix(d_t, d_t), 0.01f64..10.0).prop_map(move |(a, norm)| {
        let cur = a.one_norm().max(1e-9);
        SkewParam::new(a.scale(norm / cur), d_s, d_t).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exp_of_skew_is_orthogonal_with_unit_determinant(w in matrix(6, 6), scale in 0.01f64..10.0) {
        let skew_w = {
            let s = w.sub(&w.transpose());
            let n = s.one_norm().max(1e-9);
            s.scale(scale / n)
        };
        let q = expm(&skew_w).unwrap();
        prop_assert!(orthogonality_residual(&q) <= 1e-9);
        prop_assert!((det(&q).unwrap() - 1.0).abs() <= 1e-8);
        // exp(W)^T = exp(-W)
        let qt = q.transpose();
        let qneg = expm(&skew_w.scale(-1.0)).unwrap();
        prop_assert!(qt.sub(&qneg).frobenius_norm() <= 1e-10);
    }

    #[test]
    fn projector_is_row_orthonormal_for_both_methods(p in skew_param(4, 7)) {
        for method in [OrthoMethod::Expm, OrthoMethod::Cayley] {
            let proj = build_projection(&p, method).unwrap();
            prop_assert!(orthogonality_residual(&proj) <= 1e-8, "{}", method.label());
        }
    }

    #[test]
    fn kernel_is_preserved_only_by_the_orthogonal_family(
        p in skew_param(5, 9),
        z in matrix(8, 5),
    ) {
        let proj = build_projection(&p, OrthoMethod::Expm).unwrap();
        prop_assert!(kernel_preservation_error(&z, &proj).unwrap() <= 1e-8);
    }

    #[test]
    fn skew_output_is_exactly_antisymmetric(a in matrix(8, 8)) {
        let w = skew(&a).unwrap();
        prop_assert_eq!(w.clone(), w.transpose().scale(-1.0));
    }

    #[test]
    fn frechet_block_identity_holds(w in matrix(4, 4), e in matrix(4, 4)) {
        let (_, l) = expm_frechet(&w, &e).unwrap();
        // Assemble the block matrix independently and exponentiate it whole.
        let mut block = Matrix::zeros(8, 8);
        for r in 0..4 {
            for c in 0..4 {
                block[(r, c)] = w[(r, c)];
                block[(r, 4 + c)] = e[(r, c)];
                block[(4 + r, 4 + c)] = w[(r, c)];
            }
        }
        let big = expm(&block).unwrap();
        let mut top_right = Matrix::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                top_right[(r, c)] = big[(r, 4 + c)];
            }
        }
        prop_assert!(l.sub(&top_right).frobenius_norm() <= 1e-9);
    }

    #[test]
    fn standardize_and_layer_norm_are_idempotent(z in matrix(12, 6)) {
        let s1 = standardize(&z, 1e-5).unwrap();
        let s2 = standardize(&s1, 1e-5).unwrap();
        prop_assert!(s2.sub(&s1).frobenius_norm() <= 1e-8);
        let l1 = layer_norm(&z, 1e-5).unwrap();
        let l2 = layer_norm(&l1, 1e-5).unwrap();
        prop_assert!(l2.sub(&l1).frobenius_norm() <= 1e-8);
    }

    #[test]
    fn l2_loss_is_rotation_invariant(
        zp in matrix(6, 5),
        zt in matrix(6, 5),
        p in skew_param(5, 5),
    ) {
        let rot = build_projection(&p, OrthoMethod::Expm).unwrap();
        let (l0, _) = l2_distill_loss(&zp, &zt).unwrap();
        let (l1, _) = l2_distill_loss(
            &matmul(&zp, &rot).unwrap(),
            &matmul(&zt, &rot).unwrap(),
        ).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-9);
    }

    #[test]
    fn cross_corr_diagonal_vanishes_on_equal_inputs(z in matrix(9, 4)) {
        let c = cross_corr(&z, &z).unwrap();
        for i in 0..4 {
            prop_assert_eq!(c[(i, i)], 0.0);
        }
    }

    #[test]
    fn feature_dump_round_trip(
        rows in 0usize..12,
        cols in 0usize..9,
        with_labels in proptest::bool::ANY,
        raw in proptest::collection::vec(-1000.0f64..1000.0, 0..108),
    ) {
        let mut data = vec![0.0; rows * cols];
        for (d, r) in data.iter_mut().zip(&raw) {
            *d = *r;
        }
        let z = Matrix::from_vec(rows, cols, data).unwrap();
        let labels: Option<Vec<u32>> = with_labels.then(|| (0..rows as u32).collect());
        let bytes = encode_features(&z, labels.as_deref()).unwrap();
        let (z2, l2) = decode_features(&bytes).unwrap();
        prop_assert_eq!(l2.clone(), labels);
        prop_assert_eq!(z2.shape(), z.shape());
        for (a, b) in z.data().iter().zip(z2.data()) {
            // f32 quantization on write.
            prop_assert!((a - b).abs() <= a.abs().max(1.0) * 1.2e-7);
        }
        // Re-encoding the decoded payload reproduces the bytes exactly.
        let again = encode_features(&z2, l2.as_deref()).unwrap();
        prop_assert_eq!(again, bytes);
    }
}

#[test]
fn expm_matches_dd_taylor_oracle_on_a_generic_matrix() {
    // Entries in [-1, 1], not skew: the contract is generic.
    let mut rng = common::seeded(2024);
    let w = Matrix::random_normal(6, 6, 0.5, &mut rng);
    let got = expm(&w).unwrap();
    let want = common::taylor_expm_dd(&w, 60);
    let rel = rel_frobenius(&got, &want);
    assert!(rel <= 1e-10, "relative error {rel:e}");
}

#[test]
fn expm_holds_its_tolerance_at_the_one_norm_50_boundary() {
    // The plain 60-term series diverges at this norm; the oracle reduces the
    // argument by 2^4 (inner norm ~3) and squares back in double-double.
    let mut rng = common::seeded(2025);
    let w = common::random_skew_with_norm(6, 50.0, &mut rng);
    assert!((w.one_norm() - 50.0).abs() < 1e-9);
    let got = expm(&w).unwrap();
    let want = common::taylor_expm_dd_scaled(&w, 60, 4);
    let rel = rel_frobenius(&got, &want);
    assert!(rel <= 1e-10, "relative error {rel:e}");
}

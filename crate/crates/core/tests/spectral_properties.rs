mod common;

use common::{char_poly, matrix_with_spectrum, poly_roots, spectrum_distance};
use nalgebra::{DMatrix, DVector};
use nonconv_core::spectral::{adapted_inner_product, project_pm, reassemble, split_jacobian};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spectrum_of(m: &DMatrix<f64>) -> common::Spectrum {
    if m.is_empty() {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_diagonalization(seed in any::<u64>(), d in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, spectrum) = matrix_with_spectrum(&mut rng, d, 1e-2, None);
        let split = split_jacobian(&h, None).unwrap();
        let scale = 1.0 + h.norm();
        prop_assert!(split.residual(&h) <= 1e-8 * scale);
        let back = &split.p * split.block_diagonal() * &split.p_inv;
        prop_assert!((back - &h).norm() <= 1e-8 * scale);

        let positive = spectrum.iter().filter(|e| e.0 > 0.0).count();
        prop_assert_eq!(split.delta_plus, positive);
        prop_assert_eq!(split.delta_plus + split.delta_minus, d);
        prop_assert!(spectrum_distance(&spectrum_of(&split.block_diagonal()), &spectrum) <= 1e-8);
        prop_assert!(spectrum_distance(&spectrum_of(&split.h_plus),
            &spectrum.iter().copied().filter(|e| e.0 > 0.0).collect()) <= 1e-8);
        prop_assert!(split.mu <= 0.0);
    }

    #[test]
    fn mu_matches_polynomial_roots(seed in any::<u64>(), d in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, _) = matrix_with_spectrum(&mut rng, d, 1e-2, None);
        let split = split_jacobian(&h, None).unwrap();
        let roots = poly_roots(&char_poly(&h));
        let oracle = roots
            .iter()
            .map(|r| r.0)
            .filter(|re| *re < 0.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let oracle = if oracle.is_finite() { oracle } else { 0.0 };
        prop_assert!((split.mu - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()),
            "mu {} vs oracle {}", split.mu, oracle);
    }

    #[test]
    fn adapted_norm_is_coercive(seed in any::<u64>(), d in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, _) = matrix_with_spectrum(&mut rng, d, 5e-2, Some(true));
        let norm = adapted_inner_product(&h).unwrap();
        prop_assert!(norm.residual <= 1e-8);
        prop_assert!((&norm.s - norm.s.transpose()).norm() == 0.0);
        for _ in 0..100 {
            let x = DVector::<f64>::from_fn(d, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
            let x = x.normalize();
            let gap = x.dot(&(&norm.s * &h * &x)) - norm.lambda * norm.norm_sq(&x);
            prop_assert!(gap >= -1e-9, "gap {}", gap);
        }
    }

    #[test]
    fn projection_round_trip(seed in any::<u64>(), d in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, _) = matrix_with_spectrum(&mut rng, d, 1e-2, None);
        let split = split_jacobian(&h, None).unwrap();
        let x = DVector::<f64>::from_fn(d, |i, _| (i as f64 + 1.0) * 0.7 - 1.3);
        let x_star = DVector::<f64>::from_fn(d, |i, _| 0.1 * i as f64);
        let (yp, ym) = project_pm(&split, &x, &x_star).unwrap();
        prop_assert_eq!(yp.len(), split.delta_plus);
        let back = reassemble(&split, &yp, &ym, &x_star);
        prop_assert!((back - &x).norm() <= 1e-10 * x.norm());
    }
}

#[test]
fn oracle_sanity() {
    let h = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, -2.0, -3.0]);
    assert_eq!(char_poly(&h), vec![1.0, 0.0, -1.0]);
    let mut roots: Vec<f64> = poly_roots(&char_poly(&h)).iter().map(|r| r.0).collect();
    roots.sort_by(f64::total_cmp);
    assert!((roots[0] + 1.0).abs() < 1e-12 && (roots[1] - 1.0).abs() < 1e-12);
}

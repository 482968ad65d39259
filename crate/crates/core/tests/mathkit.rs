use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use scaledfx::mathkit::{
    chisq_upper_tail, empirical_covariance, normal_cdf, normal_quantile, normal_sf, pseudo_inverse, seeded_rng,
    solve_spd, spd_inverse, SymmetricMatrix,
};

#[test]
fn normal_reference_points() {
    assert_eq!(normal_cdf(0.0), 0.5);
    assert!((normal_quantile(0.975).unwrap() - 1.959964).abs() < 1e-5);
    assert!(normal_quantile(0.0).is_err() && normal_quantile(1.0).is_err());
}

#[test]
fn chisq_reference_points() {
    assert_eq!(chisq_upper_tail(0.0, 3.0).unwrap(), 1.0);
    assert!((chisq_upper_tail(7.815, 3.0).unwrap() - 0.05).abs() < 5e-4);
    assert!((chisq_upper_tail(3.841, 1.0).unwrap() - 0.05).abs() < 5e-4);
    assert!(chisq_upper_tail(-1.0, 2.0).is_err() || chisq_upper_tail(-1.0, 2.0).unwrap() == 1.0);
}

#[test]
fn chisq_matches_independent_library() {
    for df in [1.0, 2.0, 3.0, 5.0, 10.0, 40.0] {
        let reference = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.5, 1.0, 3.0, 7.5, 20.0, 60.0] {
            let ours = chisq_upper_tail(x, df).unwrap();
            let theirs = reference.sf(x);
            assert!(
                (ours - theirs).abs() <= 1e-10 * theirs.max(1e-300) + 1e-15,
                "df {df} x {x}: {ours} vs {theirs}"
            );
        }
    }
}

#[test]
fn normal_tail_matches_high_precision_values() {
    // 40-digit values computed with mpmath
    for (x, truth) in [
        (-3.6, 1.591085901575338253e-4),
        (-5.0, 2.866515718791939117e-7),
        (-8.0, 6.220960574271784123e-16),
    ] {
        assert!((normal_cdf(x) / truth - 1.0).abs() < 1e-13, "{x}: {}", normal_cdf(x));
    }
}

#[test]
fn normal_matches_independent_library() {
    let reference = Normal::new(0.0, 1.0).unwrap();
    for i in -80..=80 {
        let x = i as f64 * 0.1;
        // statrs itself drifts by about 1e-10 relative in the tails
        let (cdf, sf) = (reference.cdf(x), reference.sf(x));
        assert!((normal_cdf(x) - cdf).abs() <= 1e-9 * cdf.min(1.0 - cdf) + 1e-15, "{x}");
        assert!((normal_sf(x) - sf).abs() <= 1e-9 * sf.min(1.0 - sf) + 1e-15, "{x}");
    }
    for p in [1e-10, 1e-4, 0.01, 0.3, 0.5, 0.9, 0.999] {
        let q = normal_quantile(p).unwrap();
        assert!((q - reference.inverse_cdf(p)).abs() < 1e-8 * q.abs().max(1.0), "{p}");
    }
}

proptest! {
    #[test]
    fn normal_cdf_is_monotone(x in -9.0f64..9.0, dx in 1e-6f64..1.0) {
        prop_assert!(normal_cdf(x) <= normal_cdf(x + dx));
        prop_assert!((normal_cdf(x) + normal_sf(x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf(x in -6.0f64..6.0) {
        let back = normal_quantile(normal_cdf(x)).unwrap();
        prop_assert!((back - x).abs() < 1e-8, "{} -> {}", x, back);
    }

    #[test]
    fn chisq_tail_is_decreasing(x in 0.0f64..80.0, dx in 1e-3f64..5.0, df in 1usize..30) {
        let a = chisq_upper_tail(x, df as f64).unwrap();
        let b = chisq_upper_tail(x + dx, df as f64).unwrap();
        prop_assert!(b <= a);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn spd_solve_has_small_residual(entries in prop::collection::vec(-1.0f64..1.0, 25), rhs in prop::collection::vec(-5.0f64..5.0, 5)) {
        let m = DMatrix::from_vec(5, 5, entries);
        let a = &m * m.transpose() + DMatrix::identity(5, 5) * 0.5;
        let sym = SymmetricMatrix::from_dense(&a).unwrap();
        let b = DVector::from_vec(rhs);
        let x = solve_spd(&sym, &b).unwrap();
        prop_assert!(!x.pseudo_inverse);
        prop_assert!((&a * &x.value - &b).amax() < 1e-9);
        let inv = spd_inverse(&sym).unwrap();
        prop_assert!((&a * inv - DMatrix::<f64>::identity(5, 5)).amax() < 1e-9);
    }

    #[test]
    fn pseudo_inverse_satisfies_penrose(entries in prop::collection::vec(-1.0f64..1.0, 8)) {
        // rank at most 2 in dimension 4
        let m = DMatrix::from_vec(4, 2, entries);
        let a = &m * m.transpose();
        let sym = SymmetricMatrix::from_dense(&a).unwrap();
        let p = pseudo_inverse(&sym).unwrap();
        prop_assert!(p.rank <= 2);
        let scale = a.amax().max(1e-12);
        prop_assert!((&a * &p.value * &a - &a).amax() < 1e-8 * scale);
    }

    #[test]
    fn covariance_matches_direct_formula(entries in prop::collection::vec(-10.0f64..10.0, 30)) {
        let m = DMatrix::from_vec(10, 3, entries);
        let c = empirical_covariance(&m).unwrap();
        let centered = DMatrix::from_fn(10, 3, |i, j| m[(i, j)] - m.column(j).mean());
        let direct = centered.transpose() * &centered / 10.0;
        prop_assert!((c.to_dense() - direct).amax() < 1e-10);
    }
}

#[test]
fn diagonal_and_identity_solves() {
    let b = DVector::from_vec(vec![3.0, -1.5, 2.0]);
    assert_eq!(solve_spd(&SymmetricMatrix::identity(3), &b).unwrap().value, b);
    let d = SymmetricMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]))).unwrap();
    let x = solve_spd(&d, &DVector::from_vec(vec![2.0, 8.0])).unwrap().value;
    assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
}

#[test]
fn covariance_recovers_generating_matrix() {
    let target = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, -0.8, 1.2, 2.0, 0.3, -0.8, 0.3, 1.0]);
    let chol = target.clone().cholesky().unwrap().l();
    let mut rng = seeded_rng(99, 0);
    let n = 10_000;
    let z = DMatrix::from_fn(n, 3, |_, _| rng.normal());
    let draws = z * chol.transpose();
    let c = empirical_covariance(&draws).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let t = target[(i, j)];
            // 5% relative on entries that are not small next to the diagonal
            let tol = 0.05 * t.abs().max((target[(i, i)] * target[(j, j)]).sqrt() * 0.5);
            assert!((c.get(i, j) - t).abs() < tol, "({i},{j}) {} vs {t}", c.get(i, j));
        }
    }
}

#[test]
fn rng_streams_are_reproducible() {
    let mut a = seeded_rng(5, 3);
    let mut b = seeded_rng(5, 3);
    let xa: Vec<f64> = (0..1000).map(|_| a.uniform()).collect();
    let xb: Vec<f64> = (0..1000).map(|_| b.uniform()).collect();
    assert_eq!(xa, xb);
    let mut c = seeded_rng(5, 4);
    assert_ne!(xa[0], c.uniform());
}

#[test]
fn rng_moments() {
    let mut rng = seeded_rng(1, 0);
    let n = 1_000_000;
    let u: f64 = (0..n).map(|_| rng.uniform()).sum::<f64>() / n as f64;
    assert!((u - 0.5).abs() < 0.002);
    let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((var - 1.0).abs() < 0.01);
}

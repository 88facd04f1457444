mod common;

use koopman_lqr::kernels::{gram, thin_plate_features, KernelFamily, KernelSpec};
use koopman_lqr::numerics::sym_eigen;
use proptest::prelude::*;

fn unit(family: KernelFamily) -> KernelSpec {
    KernelSpec::new(family, 1.0, 1.0).unwrap()
}

#[test]
fn matern52_at_zero_distance_is_variance() {
    let k = unit(KernelFamily::Matern52);
    assert_eq!(k.eval(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 1.0);
}

#[test]
fn matern52_at_unit_distance_matches_closed_form() {
    let k = unit(KernelFamily::Matern52);
    let s5 = 5f64.sqrt();
    let oracle = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
    let v = k.eval(&[0.0, 0.0], &[0.6, 0.8]).unwrap();
    assert!((v - oracle).abs() < 1e-15, "{v} vs {oracle}");
}

#[test]
fn rbf_half_value_point() {
    let k = unit(KernelFamily::Rbf);
    let r = (2.0 * 2f64.ln()).sqrt();
    assert!((k.eval(&[0.0], &[r]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn eval_rejects_bad_input() {
    let k = unit(KernelFamily::Rbf);
    assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
    assert!(k.eval(&[f64::NAN], &[0.0]).is_err());
    assert!(KernelSpec::new(KernelFamily::Rbf, 0.0, 1.0).is_err());
    assert!(KernelSpec::new(KernelFamily::Rbf, 1.0, -1.0).is_err());
}

#[test]
fn gram_single_point_and_symmetry() {
    let k = KernelSpec::new(KernelFamily::Matern32, 0.7, 2.5).unwrap();
    let g = gram(&k, &[vec![0.1]], &[vec![0.1]]).unwrap();
    assert_eq!((g.nrows(), g.ncols(), g[(0, 0)]), (1, 1, 2.5));

    let xs = common::random_points(9, 3, 1);
    let g = gram(&k, &xs, &xs).unwrap();
    for i in 0..9 {
        for j in 0..9 {
            assert_eq!(g[(i, j)].to_bits(), g[(j, i)].to_bits());
        }
    }
}

#[test]
fn gram_matches_pairwise_loop() {
    let k = unit(KernelFamily::Matern52);
    let xs = common::random_points(5, 2, 2);
    let ys = common::random_points(3, 2, 3);
    let g = gram(&k, &xs, &ys).unwrap();
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let r = ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt();
            let a = 5f64.sqrt() * r;
            let oracle = (1.0 + a + a * a / 3.0) * (-a).exp();
            assert!((g[(i, j)] - oracle).abs() <= 1e-14);
        }
    }
    assert!(gram(&k, &[], &ys).is_err());
}

#[test]
fn thin_plate_examples() {
    let c = vec![vec![0.0, 0.0]];
    assert_eq!(thin_plate_features(&[0.0, 0.0], &c).unwrap(), vec![0.0]);
    assert_eq!(thin_plate_features(&[1.0, 0.0], &c).unwrap(), vec![0.0]);
    let e = std::f64::consts::E;
    let v = thin_plate_features(&[0.0, e], &c).unwrap()[0];
    assert!((v - e * e).abs() < 1e-12 && (v - 7.389056).abs() < 1e-6);
    assert!(thin_plate_features(&[0.0], &c).is_err());
    assert!(thin_plate_features(&[0.0], &[]).is_err());
}

#[test]
fn thin_plate_continuous_at_zero() {
    let v = thin_plate_features(&[1e-8], &[vec![0.0]]).unwrap()[0];
    assert!(v.abs() < 1e-14);
}

fn family() -> impl Strategy<Value = KernelFamily> {
    prop_oneof![Just(KernelFamily::Rbf), Just(KernelFamily::Matern52), Just(KernelFamily::Matern32)]
}

proptest! {
    #[test]
    fn kernel_is_bounded_symmetric_and_stationary(
        fam in family(),
        ell in 0.1f64..5.0,
        var in 0.1f64..4.0,
        x in prop::collection::vec(-3.0f64..3.0, 3),
        y in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let k = KernelSpec::new(fam, ell, var).unwrap();
        let kxy = k.eval(&x, &y).unwrap();
        prop_assert_eq!(kxy, k.eval(&y, &x).unwrap());
        prop_assert_eq!(k.eval(&x, &x).unwrap(), var);
        prop_assert!(kxy > 0.0 && kxy <= var);
        prop_assert!((k.kappa() - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gram_is_numerically_psd(fam in family(), seed in 0u64..1000, n in 1usize..25) {
        let k = KernelSpec::new(fam, 0.8, 1.3).unwrap();
        let xs = common::random_points(n, 2, seed);
        let g = gram(&k, &xs, &xs).unwrap();
        let eig = sym_eigen(g.as_ref()).unwrap();
        prop_assert!(eig.values.iter().all(|&l| l >= -1e-10 * 1.3 * n as f64));
    }
}

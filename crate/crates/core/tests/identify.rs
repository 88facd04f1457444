mod common;

use faer::Mat;
use koopman_lqr::data::{sample_landmarks, Dataset, LandmarkSet, SamplingStrategy};
use koopman_lqr::identify::{fit, KoopmanModel, Lifting};
use koopman_lqr::kernels::{gram, KernelFamily, KernelSpec};
use koopman_lqr::numerics::{psd_pinv, RankTolerance};
use koopman_lqr::theory::{build_exact_operator, build_nystrom_operator, operator_gap_norm};
use proptest::prelude::*;

fn tol() -> RankTolerance {
    RankTolerance::default()
}

fn m52(ell: f64) -> KernelSpec {
    KernelSpec::new(KernelFamily::Matern52, ell, 1.0).unwrap()
}

fn nystrom(ds: &Dataset, kernel: KernelSpec, m: usize, seed: u64, gamma: f64) -> KoopmanModel {
    let landmarks = sample_landmarks(ds, m, SamplingStrategy::IndependentUniform, seed).unwrap();
    fit(ds, &Lifting::Nystrom { kernel, landmarks }, gamma, gamma, tol()).unwrap()
}

fn full(ds: &Dataset, kernel: KernelSpec, gamma: f64) -> KoopmanModel {
    fit(ds, &Lifting::Nystrom { kernel, landmarks: LandmarkSet::full(ds) }, gamma, gamma, tol()).unwrap()
}

fn max_abs(m: &Mat<f64>) -> f64 {
    let mut v: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            v = v.max(m[(i, j)].abs());
        }
    }
    v
}

#[test]
fn zero_controls_give_zero_input_block() {
    let ds = common::scalar_linear(0.7, 0.0, 4, 20, 1);
    let model = nystrom(&ds, m52(1.0), 15, 2, 1e-4);
    assert_eq!(max_abs(&model.b), 0.0);

    let tp = fit(&ds, &Lifting::ThinPlate { centers: ds.ys[..10].to_vec() }, 1e-4, 1e-4, tol()).unwrap();
    assert_eq!(max_abs(&tp.b), 0.0);
}

#[test]
fn shapes_follow_landmark_count() {
    let ds = common::cubic_dataset(3, 0.5, 3);
    let model = nystrom(&ds, m52(1.0), 12, 4, 1e-6);
    assert_eq!((model.a.nrows(), model.a.ncols()), (12, 12));
    assert_eq!((model.b.nrows(), model.b.ncols()), (12, 1));
    assert_eq!((model.c.nrows(), model.c.ncols()), (1, 12));
    let g = &model.gram_out_pinv_sqrt;
    assert!(max_abs(&(g - g.transpose())) == 0.0);
}

#[test]
fn identity_dynamics_interpolate_training_outputs() {
    let ds = common::identity_dataset(25, 2, 5);
    let model = full(&ds, m52(0.8), 1e-12);
    for (x, y) in ds.xs.iter().zip(&ds.ys) {
        let z = model.predict_step(&model.embed_state(x).unwrap(), &[0.0]).unwrap();
        let xh = model.reconstruct(&z);
        for (a, b) in xh.iter().zip(y) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn full_landmarks_recover_exact_estimator() {
    // Well-separated pairs keep the full landmark Grams far from the rank cutoff.
    let xs = common::random_points(20, 2, 6);
    let us = common::random_points(20, 1, 7);
    let ys: Vec<Vec<f64>> = xs.iter().zip(&us).map(|(x, u)| vec![x[1] + 0.1 * u[0], x[0] - x[0].powi(3)]).collect();
    let ds = Dataset::new(xs, us, ys).unwrap();
    let kernel = m52(0.5);
    let gamma = 1e-3;
    let lm = LandmarkSet::full(&ds);
    let exact = build_exact_operator(&ds, &kernel, gamma).unwrap();
    let approx = build_nystrom_operator(&ds, &kernel, gamma, &lm, tol()).unwrap();
    let gap = operator_gap_norm(&exact, &approx, &kernel).unwrap();
    assert!(gap <= 1e-8, "gap {gap}");
}

#[test]
fn embedding_examples() {
    let k = KernelSpec::new(KernelFamily::Rbf, 0.5, 1.0).unwrap();
    let ds = common::identity_dataset(10, 1, 1);
    let landmarks = LandmarkSet {
        inputs: vec![ds.xs[0].clone()],
        outputs: vec![ds.xs[0].clone()],
        seed: 0,
    };
    let model = fit(&ds, &Lifting::Nystrom { kernel: k, landmarks }, 1e-3, 1e-3, tol()).unwrap();
    let z = model.embed_state(&ds.xs[0]).unwrap();
    assert!((z[0] - 1.0).abs() < 1e-15);
    let far = model.embed_state(&[ds.xs[0][0] + 50.0]).unwrap();
    assert!(far[0].abs() <= 1e-6);
    assert!(model.embed_state(&[0.0, 0.0]).is_err());
}

#[test]
fn embedding_norm_is_projection_norm() {
    let ds = common::cubic_dataset(3, 0.5, 7);
    let kernel = m52(0.7);
    let model = nystrom(&ds, kernel, 20, 8, 1e-6);
    let Lifting::Nystrom { landmarks, .. } = &model.lifting else { unreachable!() };
    let kinv = psd_pinv(gram(&kernel, &landmarks.outputs, &landmarks.outputs).unwrap().as_ref(), tol()).unwrap();
    for x in common::random_points(20, 1, 9) {
        let z = model.embed_state(&x).unwrap();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let kx = gram(&kernel, &landmarks.outputs, &[x]).unwrap();
        let proj = (kx.transpose() * &kinv * &kx)[(0, 0)].sqrt();
        assert!((norm - proj).abs() <= 1e-6, "{norm} vs {proj}");
        assert!(norm <= kernel.kappa() + 1e-12);
    }
}

#[test]
fn predict_step_is_linear() {
    let ds = common::cubic_dataset(3, 0.5, 10);
    let model = nystrom(&ds, m52(1.0), 10, 11, 1e-6);
    let zero = vec![0.0; 10];
    assert!(model.predict_step(&zero, &[0.0]).unwrap().iter().all(|&v| v == 0.0));
    let z1: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
    let z2: Vec<f64> = (0..10).map(|i| (i as f64 * 0.3).cos()).collect();
    let sum: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
    let lhs = model.predict_step(&sum, &[0.7]).unwrap();
    let a = model.predict_step(&z1, &[0.2]).unwrap();
    let b = model.predict_step(&z2, &[0.5]).unwrap();
    for i in 0..10 {
        assert!((lhs[i] - a[i] - b[i]).abs() <= 1e-12);
    }
    assert!(model.predict_step(&z1, &[0.0, 0.0]).is_err());
}

#[test]
fn forecast_examples() {
    let ds = common::cubic_dataset(3, 0.5, 12);
    let model = nystrom(&ds, m52(1.0), 10, 13, 1e-6);
    assert!(model.forecast(&[0.3], &[]).unwrap().is_empty());

    let lin = common::scalar_linear(0.5, 0.0, 40, 12, 14);
    let model = full(&lin, m52(1.0), 1e-10);
    // Lifted states are embedded through output landmarks, which only reach |x| <= 0.5 here.
    let x0 = 0.4;
    let xs = model.forecast(&[x0], &vec![vec![0.0]; 10]).unwrap();
    for (t, x) in xs.iter().enumerate() {
        let truth = 0.5f64.powi(t as i32 + 1) * x0;
        assert!((x[0] - truth).abs() <= 1e-3, "t={} {} vs {truth}", t + 1, x[0]);
    }

    let id = common::identity_dataset(30, 1, 15);
    let model = full(&id, m52(1.0), 1e-12);
    let x0 = id.xs[3][0];
    for x in model.forecast(&[x0], &vec![vec![0.0]; 10]).unwrap() {
        assert!((x[0] - x0).abs() <= 1e-4);
    }
}

#[test]
fn training_risk_grows_with_gamma() {
    let ds = common::cubic_dataset(4, 0.5, 16);
    let landmarks = sample_landmarks(&ds, 20, SamplingStrategy::IndependentUniform, 17).unwrap();
    let lifting = Lifting::Nystrom { kernel: m52(1.0), landmarks };
    let risks: Vec<f64> = [1e-8, 1e-4, 1e-1]
        .iter()
        .map(|&g| fit(&ds, &lifting, g, g, tol()).unwrap().diagnostics.train_risk)
        .collect();
    assert!(risks[0] <= risks[1] && risks[1] <= risks[2], "{risks:?}");
}

#[test]
fn reconstruction_minimizes_ridge_objective() {
    let ds = common::cubic_dataset(3, 0.5, 18);
    let model = nystrom(&ds, m52(1.0), 8, 19, 1e-3);
    let zs: Vec<Vec<f64>> = ds.ys.iter().map(|y| model.embed_state(y).unwrap()).collect();
    let objective = |c: &Mat<f64>| {
        let n = ds.n() as f64;
        let mut s = 0.0;
        for (z, y) in zs.iter().zip(&ds.ys) {
            let xh: f64 = (0..z.len()).map(|j| c[(0, j)] * z[j]).sum();
            s += (y[0] - xh).powi(2);
        }
        s / n + model.lambda * c.norm_l2().powi(2)
    };
    let base = objective(&model.c);
    for j in 0..model.c.ncols() {
        for step in [1e-4, -1e-4] {
            let mut c = model.c.clone();
            c[(0, j)] += step;
            assert!(objective(&c) >= base - 1e-15, "entry {j} step {step}");
        }
    }
}

#[test]
fn json_round_trip_is_lossless() {
    let ds = common::cubic_dataset(3, 0.5, 20);
    let model = nystrom(&ds, m52(1.0), 10, 21, 1e-6);
    let back = KoopmanModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back, model);
    let tp = fit(&ds, &Lifting::ThinPlate { centers: ds.ys[..6].to_vec() }, 1e-4, 1e-4, tol()).unwrap();
    assert_eq!(KoopmanModel::from_json(&tp.to_json().unwrap()).unwrap(), tp);
}

#[test]
fn invalid_fit_arguments() {
    let ds = common::cubic_dataset(2, 0.2, 22);
    let lm = LandmarkSet::full(&ds);
    let lifting = Lifting::Nystrom { kernel: m52(1.0), landmarks: lm };
    assert!(fit(&ds, &lifting, 0.0, 1.0, tol()).is_err());
    assert!(fit(&ds, &lifting, 1.0, -1.0, tol()).is_err());
    assert!(fit(&ds, &Lifting::ThinPlate { centers: vec![] }, 1.0, 1.0, tol()).is_err());
    assert!(fit(&ds, &Lifting::ThinPlate { centers: vec![vec![0.0, 0.0]] }, 1.0, 1.0, tol()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitted_matrices_are_finite(seed in 0u64..1000, m in 2usize..20, log_gamma in -8.0f64..0.0) {
        let ds = common::cubic_dataset(2, 0.3, seed);
        let model = nystrom(&ds, m52(1.0), m, seed + 1, 10f64.powf(log_gamma));
        for mat in [&model.a, &model.b, &model.c] {
            prop_assert!(mat.col_iter().all(|c| c.iter().all(|v| v.is_finite())));
        }
    }
}

mod common;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use koopman_lqr::data::{sample_landmarks, SamplingStrategy};
use koopman_lqr::identify::{fit, Lifting};
use koopman_lqr::kernels::{KernelFamily, KernelSpec};
use koopman_lqr::lqr::{
    build_weights, control_policy, dare_residual, riccati_step, solve_dare, solve_model_dare, DareMethod, DareOptions,
    LqrWeights, Policy,
};
use koopman_lqr::numerics::{spectral_radius, sym_eigen, RankTolerance};
use proptest::prelude::*;
use rand::Rng;

fn scalar(v: f64) -> Mat<f64> {
    Mat::from_fn(1, 1, |_, _| v)
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

fn opts(method: DareMethod) -> DareOptions {
    DareOptions {
        tol: 1e-12,
        max_iter: 1_000_000,
        method,
    }
}

/// Random `(A, B, Q, R)` with `ρ(A) < 1.1`, full-column `B` and PD weights.
fn random_system(m: usize, nu: usize, seed: u64) -> (Mat<f64>, Mat<f64>, LqrWeights) {
    let mut r = common::rng(seed);
    let raw = Mat::from_fn(m, m, |_, _| r.random_range(-1.0..1.0));
    let rho = spectral_radius(raw.as_ref()).unwrap().max(1e-3);
    let target = r.random_range(0.3..1.1);
    let a = Mat::from_fn(m, m, |i, j| raw[(i, j)] * target / rho);
    let b = Mat::from_fn(m, nu, |_, _| r.random_range(-1.0..1.0));
    let g = Mat::from_fn(m, m, |_, _| r.random_range(-1.0..1.0));
    let mut q = &g * g.transpose();
    for i in 0..m {
        q[(i, i)] += 0.1;
    }
    let mut rr = Mat::from_fn(nu, nu, |i, j| if i == j { r.random_range(0.5..2.0) } else { 0.0 });
    rr[(0, 0)] += 0.1;
    (a, b, LqrWeights::new(q, rr).unwrap())
}

/// Backward recursion written out with explicit inverses.
fn oracle(a: &Mat<f64>, b: &Mat<f64>, w: &LqrWeights, horizon: usize) -> Mat<f64> {
    let mut p = w.q.clone();
    for _ in 0..horizon {
        let s = &w.r + b.transpose() * &p * b;
        let s_inv = s.full_piv_lu().inverse();
        let pb = &p * b;
        p = a.transpose() * (&p - &pb * &s_inv * pb.transpose()) * a + &w.q;
    }
    p
}

fn cubic_model(m: usize) -> koopman_lqr::identify::KoopmanModel {
    let ds = common::cubic_dataset(4, 1.0, 2);
    let kernel = KernelSpec::new(KernelFamily::Matern52, 1.0, 1.0).unwrap();
    let landmarks = sample_landmarks(&ds, m, SamplingStrategy::IndependentUniform, 3).unwrap();
    fit(&ds, &Lifting::Nystrom { kernel, landmarks }, 1e-6, 1e-6, RankTolerance::default()).unwrap()
}

#[test]
fn weight_examples() {
    let model = cubic_model(10);
    let w = build_weights(&model, scalar(0.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    assert_eq!(max_abs(&w.q), 0.0);

    let mut model = model;
    model.c = Mat::from_fn(1, 10, |_, j| if j == 3 { 1.0 } else { 0.0 });
    let w = build_weights(&model, scalar(1.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    let trace: f64 = (0..10).map(|i| w.q[(i, i)]).sum();
    assert_eq!(trace, 1.0);
    assert_eq!(w.q, model.c.transpose() * &model.c);

    assert!(build_weights(&model, scalar(1.0).as_ref(), scalar(0.0).as_ref()).is_err());
    assert!(build_weights(&model, Mat::<f64>::identity(2, 2).as_ref(), scalar(1.0).as_ref()).is_err());
}

#[test]
fn dead_dynamics_give_p_equal_q() {
    let w = LqrWeights::new(scalar(1.0), scalar(1.0)).unwrap();
    for method in [DareMethod::FixedPoint, DareMethod::Doubling] {
        let sol = solve_dare(scalar(0.0).as_ref(), scalar(1.0).as_ref(), &w, &opts(method)).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(sol.k[(0, 0)].abs() < 1e-15);
    }
}

#[test]
fn scalar_golden_ratio() {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let w = LqrWeights::new(scalar(1.0), scalar(1.0)).unwrap();
    for method in [DareMethod::FixedPoint, DareMethod::Doubling] {
        let sol = solve_dare(scalar(1.0).as_ref(), scalar(1.0).as_ref(), &w, &opts(method)).unwrap();
        assert!((sol.p[(0, 0)] - phi).abs() <= 1e-12);
        assert!((sol.k[(0, 0)] + phi / (1.0 + phi)).abs() <= 1e-12);
        assert!((sol.rho_l - (1.0 - phi / (1.0 + phi))).abs() <= 1e-12);
        assert!((sol.rho_l - 0.382).abs() < 1e-3);
        assert!(dare_residual(sol.p.as_ref(), scalar(1.0).as_ref(), scalar(1.0).as_ref(), &w).unwrap() <= 1e-12);
    }
}

#[test]
fn residual_of_zero_is_q_norm() {
    let (a, b, w) = random_system(3, 1, 4);
    let qn = sym_eigen(w.q.as_ref()).unwrap().values.last().copied().unwrap();
    let res = dare_residual(Mat::<f64>::zeros(3, 3).as_ref(), a.as_ref(), b.as_ref(), &w).unwrap();
    assert!((res - qn).abs() <= 1e-12 * qn);
}

#[test]
fn random_system_matches_value_iteration() {
    let (a, b, w) = random_system(4, 2, 5);
    let truth = oracle(&a, &b, &w, 10_000);
    for method in [DareMethod::FixedPoint, DareMethod::Doubling] {
        let sol = solve_dare(a.as_ref(), b.as_ref(), &w, &opts(method)).unwrap();
        assert!(max_abs(&(&sol.p - &truth)) <= 1e-6 * max_abs(&truth).max(1.0));
        assert!(sol.residual <= 1e-8 * max_abs(&truth).max(1.0));
        assert!(sol.rho_l < 1.0);
    }
}

#[test]
fn iteration_budget_is_reported() {
    let (a, b, w) = random_system(4, 1, 6);
    let o = DareOptions {
        tol: 1e-12,
        max_iter: 2,
        method: DareMethod::FixedPoint,
    };
    assert!(matches!(solve_dare(a.as_ref(), b.as_ref(), &w, &o), Err(koopman_lqr::Error::NotConverged { .. })));
}

#[test]
fn zero_gain_gives_zero_control() {
    let model = cubic_model(10);
    let w = build_weights(&model, scalar(1.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    let mut sol = solve_model_dare(&model, &w, &DareOptions::default()).unwrap();
    sol.k = Mat::zeros(1, 10);
    assert_eq!(control_policy(&model, &sol, &[0.4]).unwrap(), vec![0.0]);
    let policy = Policy::new(&model, sol.k.as_ref(), None).unwrap();
    assert_eq!(policy.control(&[0.4]), vec![0.0]);
}

#[test]
fn far_state_gives_zero_control() {
    let model = cubic_model(10);
    let w = build_weights(&model, scalar(1.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    let sol = solve_model_dare(&model, &w, &DareOptions::default()).unwrap();
    let u = control_policy(&model, &sol, &[1e4]).unwrap();
    assert!(u[0].abs() < 1e-12);
}

#[test]
fn policy_matches_control_policy() {
    let model = cubic_model(12);
    let w = build_weights(&model, scalar(1.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    let sol = solve_model_dare(&model, &w, &DareOptions::default()).unwrap();
    let policy = Policy::new(&model, sol.k.as_ref(), None).unwrap();
    for x in [-0.9, -0.2, 0.0, 0.5, 0.9] {
        let a = control_policy(&model, &sol, &[x]).unwrap()[0];
        let b = policy.control(&[x])[0];
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
    let shifted = Policy::new(&model, sol.k.as_ref(), Some(&[0.0])).unwrap();
    assert!(shifted.control(&[0.0])[0].abs() < 1e-15);
}

#[test]
fn model_dare_agrees_with_dense_solve() {
    let model = cubic_model(12);
    let w = build_weights(&model, scalar(1.0).as_ref(), scalar(1.0).as_ref()).unwrap();
    let reduced = solve_model_dare(&model, &w, &DareOptions::default()).unwrap();
    let dense = solve_dare(model.a.as_ref(), model.b.as_ref(), &w, &DareOptions::default()).unwrap();
    let scale = max_abs(&dense.p).max(1.0);
    assert!(max_abs(&(&reduced.p - &dense.p)) <= 1e-8 * scale);
    assert!(max_abs(&(&reduced.k - &dense.k)) <= 1e-8 * max_abs(&dense.k).max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solution_is_psd_and_stabilizing(seed in 0u64..100_000, m in 1usize..6, nu in 1usize..3) {
        let (a, b, w) = random_system(m, nu, seed);
        let sol = solve_dare(a.as_ref(), b.as_ref(), &w, &DareOptions::default()).unwrap();
        let eig = sym_eigen(sol.p.as_ref()).unwrap();
        let pn = eig.values.last().copied().unwrap();
        prop_assert!(eig.values[0] >= -1e-8 * pn);
        prop_assert!(sol.rho_l < 1.0);
        prop_assert!(max_abs(&(&sol.p - sol.p.transpose())) == 0.0);
    }

    #[test]
    fn rescaling_weights_rescales_p(seed in 0u64..100_000, m in 1usize..5, eta in 0.1f64..10.0) {
        let (a, b, w) = random_system(m, 1, seed);
        let scaled = LqrWeights::new(
            Mat::from_fn(m, m, |i, j| eta * w.q[(i, j)]),
            Mat::from_fn(1, 1, |i, j| eta * w.r[(i, j)]),
        ).unwrap();
        let s1 = solve_dare(a.as_ref(), b.as_ref(), &w, &DareOptions::default()).unwrap();
        let s2 = solve_dare(a.as_ref(), b.as_ref(), &scaled, &DareOptions::default()).unwrap();
        let pn = max_abs(&s1.p).max(1.0);
        let expect = Mat::from_fn(m, m, |i, j| eta * s1.p[(i, j)]);
        prop_assert!(max_abs(&(&s2.p - &expect)) <= 1e-10 * eta * pn);
        prop_assert!(max_abs(&(&s2.k - &s1.k)) <= 1e-10 * max_abs(&s1.k).max(1.0));
    }

    /// Complex closed-loop poles make single steps wobble, so the check is on the envelope:
    /// no step in the tail exceeds every earlier one and the tail ends below where it started.
    #[test]
    fn step_sizes_shrink_at_the_end(seed in 0u64..100_000, m in 1usize..5) {
        let (a, b, w) = random_system(m, 1, seed);
        let sol = solve_dare(a.as_ref(), b.as_ref(), &w, &opts(DareMethod::FixedPoint)).unwrap();
        let mut p = w.q.clone();
        let mut steps = Vec::new();
        for _ in 0..sol.iterations {
            let next = riccati_step(p.as_ref(), a.as_ref(), b.as_ref(), &w).unwrap();
            steps.push(max_abs(&(&next - &p)));
            p = next;
        }
        let start = steps.len().saturating_sub(10);
        let tail = &steps[start..];
        let floor = 1e-13 * max_abs(&p).max(1.0);
        for i in start.max(1)..steps.len() {
            let envelope = steps[..i].iter().copied().fold(0.0, f64::max);
            prop_assert!(steps[i] <= envelope || steps[i] <= floor, "{:?}", tail);
        }
        prop_assert!(tail[tail.len() - 1] <= tail[0] || tail[0] <= floor, "{:?}", tail);
    }
}

#![allow(dead_code)]

use koopman_lqr::data::{build_pairs, Dataset, Trajectory};
use koopman_lqr::simulate::{collect_training_data, InitLaw, InputLaw, Protocol, SystemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Short cubic-system dataset with uniform excitation.
pub fn cubic_dataset(n_traj: usize, duration: f64, seed: u64) -> Dataset {
    let sys = SystemSpec::cubic(0.01);
    let protocol = Protocol {
        n_traj,
        duration,
        input_law: InputLaw::UniformIid { lo: -1.0, hi: 1.0 },
        init_law: InitLaw::UniformBox { lo: -1.0, hi: 1.0 },
        seed,
    };
    build_pairs(&collect_training_data(&sys, &protocol).unwrap().trajectories).unwrap()
}

/// `x_{t+1} = a x_t + b u_t` from random starts in [-1, 1] and uniform inputs.
pub fn scalar_linear(a: f64, b: f64, n_traj: usize, len: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let trajs: Vec<Trajectory> = (0..n_traj)
        .map(|_| {
            let mut x = r.random_range(-1.0..1.0);
            let mut states = vec![vec![x]];
            let mut controls = Vec::new();
            for _ in 0..len {
                let u = if b == 0.0 { 0.0 } else { r.random_range(-1.0..1.0) };
                x = a * x + b * u;
                states.push(vec![x]);
                controls.push(vec![u]);
            }
            Trajectory::new(0.01, states, controls).unwrap()
        })
        .collect();
    build_pairs(&trajs).unwrap()
}

/// Pairs with `x_{i+1} = x_i` at random points.
pub fn identity_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    Dataset::new(xs.clone(), vec![vec![0.0]; n], xs).unwrap()
}

pub fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

//! Experiment drivers shared by the command line and the acceptance suite.

use std::io::Write;
use std::path::{Path, PathBuf};

use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{LiftingKind, RunConfig};
use crate::data::{build_pairs, fmt_f64, load_trajectories, rng_for, sample_landmarks, Dataset, LandmarkSet, Stream, Trajectory};
use crate::error::{Error, Result};
use crate::identify::{fit, KoopmanModel, Lifting};
use crate::lqr::{build_weights, solve_model_dare_or_last};
use crate::simulate::{
    collect_training_data, metric_rmse_pct, metric_rmse_u_pct, norm, rk4_step, rollout_closed_loop, rollout_with,
    square_wave, steps_for, true_optimal_control_cubic, InitLaw, RolloutConfig, RolloutResult, SystemSpec,
};

/// Trajectory CSVs from a file or every `*.csv` in a directory (sorted by name).
pub fn load_trajectory_path(path: &Path) -> Result<Vec<Trajectory>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Empty(format!("no CSV files in {}", path.display())));
        }
        let mut out = Vec::new();
        for f in files {
            out.extend(load_trajectories(&f)?);
        }
        Ok(out)
    } else {
        load_trajectories(path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub trajectories: Vec<Trajectory>,
    pub truncated: usize,
}

pub fn simulate_training(cfg: &RunConfig) -> Result<TrainingData> {
    let sys = cfg.system_spec()?;
    let mut trajectories = Vec::new();
    let mut truncated = 0;
    for p in &cfg.data.protocols {
        let c = collect_training_data(&sys, p)?;
        truncated += c.truncated.len();
        trajectories.extend(c.trajectories);
    }
    Ok(TrainingData { trajectories, truncated })
}

pub fn training_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let trajs = match &cfg.data.path {
        Some(p) => load_trajectory_path(p)?,
        None => simulate_training(cfg)?.trajectories,
    };
    build_pairs(&trajs)
}

pub fn lifting_for(ds: &Dataset, cfg: &RunConfig, kind: LiftingKind, m: usize, seed: u64) -> Result<Lifting> {
    Ok(match kind {
        LiftingKind::Exact => Lifting::Nystrom {
            kernel: cfg.kernel,
            landmarks: LandmarkSet::full(ds),
        },
        LiftingKind::Nystrom => Lifting::Nystrom {
            kernel: cfg.kernel,
            landmarks: sample_landmarks(ds, m, cfg.fit.strategy, seed)?,
        },
        // Spline centers reuse the Nyström output landmarks of the same seed.
        LiftingKind::ThinPlate => Lifting::ThinPlate {
            centers: sample_landmarks(ds, m, cfg.fit.strategy, seed)?.outputs,
        },
    })
}

pub fn fit_for_seed(ds: &Dataset, cfg: &RunConfig, kind: LiftingKind, m: usize, seed: u64) -> Result<KoopmanModel> {
    let lifting = lifting_for(ds, cfg, kind, m, seed)?;
    fit(ds, &lifting, cfg.fit.gamma, cfg.fit.lambda, cfg.fit.tol)
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlRun {
    pub seed: u64,
    pub m: usize,
    /// `Σ ⟨x−r, Q'(x−r)⟩ + ⟨u, Ru⟩` per step.
    pub cost: f64,
    /// The same sum weighted by `dt`.
    pub cost_dt: f64,
    pub rmse_u_pct: Option<f64>,
    pub dare_converged: bool,
    pub dare_iterations: usize,
    pub rho_l: f64,
    pub diverged: Option<usize>,
    pub first_in_ball: Option<usize>,
    pub steps: usize,
    pub final_error: f64,
}

fn rollout_config(cfg: &RunConfig) -> RolloutConfig {
    RolloutConfig {
        steps: cfg.lqr.steps,
        qprime: cfg.lqr.qprime.clone(),
        r: cfg.lqr.r.clone(),
        reference: cfg.lqr.reference.clone(),
        stop_below: cfg.lqr.stop_below,
    }
}

fn summarize(sys: &SystemSpec, cfg: &RunConfig, seed: u64, m: usize, roll: &RolloutResult) -> Result<ControlRun> {
    let r = cfg.lqr.reference.clone().unwrap_or_else(|| vec![0.0; sys.d]);
    let err = |x: &Vec<f64>| norm(&x.iter().zip(&r).map(|(a, b)| a - b).collect::<Vec<_>>());
    let rmse_u_pct = if cfg.system == "cubic" && cfg.lqr.reference.is_none() && !roll.controls.is_empty() {
        let k = roll.controls.len().min(cfg.lqr.rmse_u_steps);
        let u: Vec<Vec<f64>> = roll.controls[..k].to_vec();
        let u_opt: Vec<Vec<f64>> = roll.states[..k].iter().map(|x| vec![true_optimal_control_cubic(x[0])]).collect();
        metric_rmse_u_pct(&u, &u_opt).ok()
    } else {
        None
    };
    Ok(ControlRun {
        seed,
        m,
        cost: roll.total_cost(),
        cost_dt: roll.total_cost_dt(sys.dt),
        rmse_u_pct,
        dare_converged: true,
        dare_iterations: 0,
        rho_l: f64::NAN,
        diverged: roll.diverged,
        first_in_ball: roll.states.iter().position(|x| err(x) < cfg.lqr.ball),
        steps: roll.controls.len(),
        final_error: roll.states.last().map(err).unwrap_or(f64::NAN),
    })
}

/// Closed loop on the true system with the model's LQR gain.
pub fn control_run(sys: &SystemSpec, model: &KoopmanModel, cfg: &RunConfig, seed: u64) -> Result<(ControlRun, RolloutResult)> {
    let w = build_weights(model, cfg.lqr.qprime.as_ref(), cfg.lqr.r.as_ref())?;
    let (mut sol, converged) = solve_model_dare_or_last(model, &w, &cfg.lqr.dare)?;
    if cfg.lqr.zero_gain {
        sol.k = Mat::zeros(sol.k.nrows(), sol.k.ncols());
    }
    let roll = rollout_closed_loop(sys, model, &sol, &cfg.lqr.x0, &rollout_config(cfg))?;
    let mut run = summarize(sys, cfg, seed, model.m(), &roll)?;
    run.dare_converged = converged;
    run.dare_iterations = sol.iterations;
    run.rho_l = sol.rho_l;
    Ok((run, roll))
}

/// Closed loop under `u = x³ − x√(1 + x⁴)`.
pub fn optimal_cubic_run(cfg: &RunConfig) -> Result<(ControlRun, RolloutResult)> {
    let sys = cfg.system_spec()?;
    if cfg.system != "cubic" {
        return Err(Error::InvalidArgument("the known optimal law exists only for the cubic system".into()));
    }
    let roll = rollout_with(&sys, |x| vec![true_optimal_control_cubic(x[0])], &cfg.lqr.x0, &rollout_config(cfg))?;
    let run = summarize(&sys, cfg, 0, 0, &roll)?;
    Ok((run, roll))
}

/// Runs `f` for every seed in parallel, keeping seed order.
pub fn sweep<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    seeds.par_iter().map(|&s| f(s)).collect()
}

pub fn control_sweep(ds: &Dataset, cfg: &RunConfig, kind: LiftingKind, m: usize) -> Result<Vec<ControlRun>> {
    let sys = cfg.system_spec()?;
    sweep(&cfg.seeds, |seed| {
        let model = fit_for_seed(ds, cfg, kind, m, seed)?;
        Ok(control_run(&sys, &model, cfg, seed)?.0)
    })
}

#[derive(Debug, Clone)]
pub struct ForecastScenario {
    pub x0: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    /// `x_1..x_T` of the true system.
    pub truth: Vec<Vec<f64>>,
}

/// Square-wave input from a random initial state in the unit ball.
pub fn forecast_scenario(sys: &SystemSpec, cfg: &RunConfig, seed: u64) -> Result<ForecastScenario> {
    let mut rng = rng_for(seed, Stream::Evaluation);
    let x0 = InitLaw::UnitBall.sample(sys.d, &mut rng);
    let steps = steps_for(cfg.forecast.duration, sys.dt)?;
    let controls: Vec<Vec<f64>> = (0..steps)
        .map(|k| vec![square_wave(cfg.forecast.amplitude, cfg.forecast.frequency, k as f64 * sys.dt); sys.n_u])
        .collect();
    let mut truth = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for u in &controls {
        x = rk4_step(sys, &x, u)?;
        truth.push(x.clone());
    }
    Ok(ForecastScenario { x0, controls, truth })
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastRun {
    pub seed: u64,
    pub m: usize,
    /// `+∞` when the forecast diverged.
    pub rmse_pct: f64,
    pub diverged: bool,
}

pub fn forecast_run(model: &KoopmanModel, sc: &ForecastScenario, seed: u64) -> Result<(ForecastRun, Vec<Vec<f64>>)> {
    match model.forecast(&sc.x0, &sc.controls) {
        Ok(pred) => {
            let rmse = metric_rmse_pct(&sc.truth, &pred)?;
            Ok((
                ForecastRun {
                    seed,
                    m: model.m(),
                    rmse_pct: rmse,
                    diverged: false,
                },
                pred,
            ))
        }
        Err(Error::Diverged(_)) => Ok((
            ForecastRun {
                seed,
                m: model.m(),
                rmse_pct: f64::INFINITY,
                diverged: true,
            },
            Vec::new(),
        )),
        Err(e) => Err(e),
    }
}

pub fn forecast_sweep(ds: &Dataset, cfg: &RunConfig, kind: LiftingKind, m: usize) -> Result<Vec<ForecastRun>> {
    let sys = cfg.system_spec()?;
    sweep(&cfg.seeds, |seed| {
        let model = fit_for_seed(ds, cfg, kind, m, seed)?;
        let sc = forecast_scenario(&sys, cfg, seed)?;
        Ok(forecast_run(&model, &sc, seed)?.0)
    })
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("percentile input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || v[lo] == v[hi] {
        return Ok(v[lo]);
    }
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Spread {
    pub median: f64,
    pub p15: f64,
    pub p85: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Self {
            median: percentile(values, 50.0)?,
            p15: percentile(values, 15.0)?,
            p85: percentile(values, 85.0)?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Row {
    pub label: String,
    pub m: usize,
    pub cost: Spread,
    pub rmse_u_pct: Option<Spread>,
    pub unconverged_dare: usize,
}

fn runs_row(label: &str, m: usize, runs: &[ControlRun]) -> Result<Table1Row> {
    let costs: Vec<f64> = runs.iter().map(|r| if r.diverged.is_some() { f64::INFINITY } else { r.cost }).collect();
    let rmse: Vec<f64> = runs.iter().filter_map(|r| r.rmse_u_pct).collect();
    Ok(Table1Row {
        label: label.to_string(),
        m,
        cost: Spread::of(&costs)?,
        rmse_u_pct: if rmse.is_empty() { None } else { Some(Spread::of(&rmse)?) },
        unconverged_dare: runs.iter().filter(|r| !r.dare_converged).count(),
    })
}

/// Costs for the cubic benchmark: Nyström rows per `m`, the exact kernel and the known optimal law.
pub fn table1(ds: &Dataset, cfg: &RunConfig, ms: &[usize]) -> Result<Vec<Table1Row>> {
    let sys = cfg.system_spec()?;
    let mut rows = Vec::new();
    for &m in ms {
        let runs = control_sweep(ds, cfg, LiftingKind::Nystrom, m)?;
        rows.push(runs_row("nystrom", m, &runs)?);
    }
    let exact = fit_for_seed(ds, cfg, LiftingKind::Exact, ds.n(), 0)?;
    let (run, _) = control_run(&sys, &exact, cfg, 0)?;
    rows.push(runs_row("exact", ds.n(), &[run])?);
    let (opt, _) = optimal_cubic_run(cfg)?;
    rows.push(runs_row("optimal", 0, &[opt])?);
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

/// Rollout table with columns `t, x_i…, u_i…, stage_cost`; the final row has no control.
pub fn write_rollout(path: &Path, roll: &RolloutResult, dt: f64) -> Result<()> {
    let d = roll.states.first().map_or(0, |x| x.len());
    let n_u = roll.controls.first().map_or(0, |u| u.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    header.extend((0..n_u).map(|i| format!("u_{i}")));
    header.push("stage_cost".into());
    w.write_record(&header)?;
    for (t, x) in roll.states.iter().enumerate() {
        let mut row = vec![fmt_f64(t as f64 * dt)];
        row.extend(x.iter().map(|v| fmt_f64(*v)));
        match roll.controls.get(t) {
            Some(u) => {
                row.extend(u.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(roll.stage_costs[t]));
            }
            None => row.extend(std::iter::repeat_n(String::new(), n_u + 1)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_forecast(path: &Path, sc: &ForecastScenario, pred: &[Vec<f64>], dt: f64) -> Result<()> {
    let d = sc.x0.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string(), "u_0".to_string()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    header.extend((0..d).map(|i| format!("xhat_{i}")));
    w.write_record(&header)?;
    for (k, truth) in sc.truth.iter().enumerate() {
        let mut row = vec![fmt_f64((k + 1) as f64 * dt), fmt_f64(sc.controls[k][0])];
        row.extend(truth.iter().map(|v| fmt_f64(*v)));
        match pred.get(k) {
            Some(p) => row.extend(p.iter().map(|v| fmt_f64(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), d)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

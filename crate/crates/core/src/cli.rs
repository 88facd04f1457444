use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use toml::Value;

use crate::config::{FlatConfig, LiftingKind, RunConfig};
use crate::data::{cross_validate, write_trajectories, CvOptions, CvResult, Dataset};
use crate::error::{Error, Result};
use crate::experiments::{
    control_run, fit_for_seed, forecast_run, forecast_scenario, forecast_sweep, optimal_cubic_run, simulate_training,
    sweep, table1, training_dataset, write_forecast, write_json, write_rollout, ControlRun, ForecastRun, Spread,
};
use crate::identify::{FitDiagnostics, KoopmanModel};
use crate::kernels::KernelSpec;
use crate::theory::{loglog_slope, median, study_bounds, write_bound_reports, BoundReport, StudyOptions};

#[derive(Debug, Parser)]
#[command(name = "koopman-lqr", version, about = "Kernel Koopman surrogates with Nyström landmarks and LQR")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// First seed of the sweep (keeps `seeds_count`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `KEY=VALUE`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate training trajectories to CSV.
    Collect,
    /// Fit a surrogate and write it as JSON.
    Fit,
    /// Closed-loop LQR rollouts on the true system.
    Control,
    /// Open-loop square-wave forecasts.
    Forecast,
    /// Operator, Riccati and objective gaps against their bounds.
    StudyBounds,
    /// Benchmark tables for the configured system.
    Bench,
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let (mut flat, base) = match &cli.config {
        Some(p) => (
            FlatConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (FlatConfig::default(), PathBuf::from(".")),
    };
    for o in &cli.overrides {
        flat.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        flat.set("seeds_start", Value::Integer(s as i64));
        if let Some(Value::Array(list)) = flat.get("seeds").cloned() {
            flat.set("seeds_count", Value::Integer(list.len() as i64));
        }
        flat.remove("seeds");
    }
    if let Some(o) = &cli.out {
        flat.set("out", Value::String(o.display().to_string()));
    }
    RunConfig::from_flat(&flat, &base)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::Collect => cmd_collect(&cfg),
        Command::Fit => cmd_fit(&cfg).map(|_| ()),
        Command::Control => cmd_control(&cfg),
        Command::Forecast => cmd_forecast(&cfg),
        Command::StudyBounds => cmd_study_bounds(&cfg),
        Command::Bench => cmd_bench(&cfg),
    }
}

#[derive(Serialize)]
struct CollectReport {
    system: String,
    dt: f64,
    trajectories: usize,
    truncated: usize,
    files: Vec<String>,
}

/// One CSV per trajectory: `traj_0000.csv`, `traj_0001.csv`, ...
pub fn cmd_collect(cfg: &RunConfig) -> Result<()> {
    let data = simulate_training(cfg)?;
    let mut files = Vec::new();
    for (i, t) in data.trajectories.iter().enumerate() {
        let name = format!("traj_{i:04}.csv");
        write_trajectories(&cfg.out.join(&name), std::slice::from_ref(t))?;
        files.push(name);
    }
    write_json(
        &cfg.out.join("collect_report.json"),
        &CollectReport {
            system: cfg.system.clone(),
            dt: cfg.dt,
            trajectories: data.trajectories.len(),
            truncated: data.truncated,
            files,
        },
    )
}

#[derive(Serialize)]
struct FitReport<'a> {
    lifting: LiftingKind,
    m: usize,
    n: usize,
    seed: u64,
    gamma: f64,
    lambda: f64,
    kernel: KernelSpec,
    diagnostics: &'a FitDiagnostics,
    cv: Option<CvResult>,
}

fn cv_select(ds: &Dataset, cfg: &RunConfig) -> Result<(RunConfig, Option<CvResult>)> {
    if !cfg.fit.cv {
        return Ok((cfg.clone(), None));
    }
    let grid: Vec<(f64, f64)> = cfg
        .fit
        .cv_lengthscales
        .iter()
        .flat_map(|&l| cfg.fit.cv_gammas.iter().map(move |&g| (l, g)))
        .collect();
    let opts = CvOptions {
        family: cfg.kernel.family,
        variance: cfg.kernel.variance,
        folds: cfg.fit.cv_folds,
        m: cfg.fit.m,
        strategy: cfg.fit.strategy,
        seed: cfg.seeds[0],
        tol: cfg.fit.tol,
    };
    let res = cross_validate(ds, &grid, &opts)?;
    let mut out = cfg.clone();
    out.kernel = KernelSpec::new(cfg.kernel.family, res.best.lengthscale, cfg.kernel.variance)?;
    out.fit.gamma = res.best.gamma;
    out.fit.lambda = res.best.gamma;
    Ok((out, Some(res)))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<KoopmanModel> {
    let ds = training_dataset(cfg)?;
    let (cfg, cv) = cv_select(&ds, cfg)?;
    let seed = cfg.seeds[0];
    let model = fit_for_seed(&ds, &cfg, cfg.fit.lifting, cfg.fit.m, seed)?;
    model.save(&cfg.out.join("model.json"))?;
    write_json(
        &cfg.out.join("fit_report.json"),
        &FitReport {
            lifting: cfg.fit.lifting,
            m: model.m(),
            n: ds.n(),
            seed,
            gamma: cfg.fit.gamma,
            lambda: cfg.fit.lambda,
            kernel: cfg.kernel,
            diagnostics: &model.diagnostics,
            cv,
        },
    )?;
    Ok(model)
}

#[derive(Serialize)]
struct ControlMetrics {
    system: String,
    lifting: Option<LiftingKind>,
    runs: Vec<ControlRun>,
    cost: Spread,
    rmse_u_pct: Option<Spread>,
    optimal: Option<ControlRun>,
    diverged: usize,
}

fn cost_of(r: &ControlRun) -> f64 {
    if r.diverged.is_some() {
        f64::INFINITY
    } else {
        r.cost
    }
}

pub fn cmd_control(cfg: &RunConfig) -> Result<()> {
    let sys = cfg.system_spec()?;
    let (runs, lifting) = match &cfg.model_path {
        Some(p) => {
            let model = KoopmanModel::load(p)?;
            let (run, roll) = control_run(&sys, &model, cfg, cfg.seeds[0])?;
            write_rollout(&cfg.out.join("rollout.csv"), &roll, sys.dt)?;
            (vec![run], None)
        }
        None => {
            let ds = training_dataset(cfg)?;
            let runs = sweep(&cfg.seeds, |seed| {
                let model = fit_for_seed(&ds, cfg, cfg.fit.lifting, cfg.fit.m, seed)?;
                let (run, roll) = control_run(&sys, &model, cfg, seed)?;
                write_rollout(&cfg.out.join(format!("rollout_seed{seed}.csv")), &roll, sys.dt)?;
                Ok(run)
            })?;
            (runs, Some(cfg.fit.lifting))
        }
    };
    let optimal = if cfg.system == "cubic" && cfg.lqr.reference.is_none() {
        let (run, roll) = optimal_cubic_run(cfg)?;
        write_rollout(&cfg.out.join("rollout_optimal.csv"), &roll, sys.dt)?;
        Some(run)
    } else {
        None
    };
    let costs: Vec<f64> = runs.iter().map(cost_of).collect();
    let rmse: Vec<f64> = runs.iter().filter_map(|r| r.rmse_u_pct).collect();
    write_json(
        &cfg.out.join("metrics.json"),
        &ControlMetrics {
            system: cfg.system.clone(),
            lifting,
            cost: Spread::of(&costs)?,
            rmse_u_pct: if rmse.is_empty() { None } else { Some(Spread::of(&rmse)?) },
            diverged: runs.iter().filter(|r| r.diverged.is_some()).count(),
            runs,
            optimal,
        },
    )
}

#[derive(Serialize)]
struct ForecastMetrics {
    lifting: LiftingKind,
    m: usize,
    runs: Vec<ForecastRun>,
    rmse_pct: Spread,
}

pub fn cmd_forecast(cfg: &RunConfig) -> Result<()> {
    let sys = cfg.system_spec()?;
    let ds = training_dataset(cfg)?;
    let runs = sweep(&cfg.seeds, |seed| {
        let model = fit_for_seed(&ds, cfg, cfg.fit.lifting, cfg.fit.m, seed)?;
        let sc = forecast_scenario(&sys, cfg, seed)?;
        let (run, pred) = forecast_run(&model, &sc, seed)?;
        write_forecast(&cfg.out.join(format!("forecast_seed{seed}.csv")), &sc, &pred, sys.dt)?;
        Ok(run)
    })?;
    let rmse: Vec<f64> = runs.iter().map(|r| r.rmse_pct).collect();
    write_json(
        &cfg.out.join("metrics.json"),
        &ForecastMetrics {
            lifting: cfg.fit.lifting,
            m: cfg.fit.m,
            rmse_pct: Spread::of(&rmse)?,
            runs,
        },
    )
}

/// Every `k`-th pair so that `n` pairs remain, spread over all trajectories.
pub fn strided_subset(ds: &Dataset, n: usize) -> Result<Dataset> {
    if n == 0 || n > ds.n() {
        return Err(Error::InvalidArgument(format!("cannot take {n} pairs from {}", ds.n())));
    }
    let idx: Vec<usize> = (0..n).map(|i| i * ds.n() / n).collect();
    Ok(ds.subset(&idx))
}

pub fn study_options(cfg: &RunConfig) -> StudyOptions {
    StudyOptions {
        kernel: cfg.kernel,
        gamma: cfg.fit.gamma,
        lambda: cfg.fit.lambda,
        delta: cfg.bounds.delta,
        ms: cfg.bounds.ms.clone(),
        seeds: cfg.seeds.clone(),
        strategy: cfg.fit.strategy,
        qprime: cfg.lqr.qprime.clone(),
        r: cfg.lqr.r.clone(),
        x0: cfg.lqr.x0.clone(),
        tol: cfg.fit.tol,
        dare: cfg.lqr.dare,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummaryRow {
    pub m: usize,
    pub median_gap: f64,
    pub median_riccati_gap: f64,
    pub median_objective_gap: f64,
    pub theorem1_rhs: f64,
    /// Fraction of seeds with gap within the bound.
    pub coverage: f64,
    /// The same, restricted to seeds where the bound is below `‖G‖`.
    pub coverage_non_vacuous: Option<f64>,
    /// Seeds whose Nyström gain fails to stabilize the exact model.
    pub unstable_seeds: usize,
    pub median_projection_in: f64,
    pub median_projection_out: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary {
    pub rows: Vec<BoundSummaryRow>,
    pub gap_slope: f64,
    /// Fit over the sweep points with a finite median objective gap.
    pub objective_slope: Option<f64>,
    pub objective_slope_points: usize,
}

pub fn summarize_bounds(reports: &[BoundReport]) -> Result<BoundSummary> {
    let mut ms: Vec<usize> = reports.iter().map(|r| r.m).collect();
    ms.dedup();
    let mut rows = Vec::new();
    for &m in &ms {
        let sel: Vec<&BoundReport> = reports.iter().filter(|r| r.m == m).collect();
        let col = |f: fn(&BoundReport) -> f64| -> Result<f64> { median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>()) };
        let non_vacuous: Vec<&&BoundReport> = sel.iter().filter(|r| r.theorem1_rhs < r.norm_g).collect();
        let coverage = if non_vacuous.is_empty() {
            None
        } else {
            let ok = non_vacuous.iter().filter(|r| r.empirical_gap <= r.theorem1_rhs).count();
            Some(ok as f64 / non_vacuous.len() as f64)
        };
        rows.push(BoundSummaryRow {
            m,
            median_gap: col(|r| r.empirical_gap)?,
            median_riccati_gap: col(|r| r.riccati_gap)?,
            median_objective_gap: col(|r| r.objective_gap)?,
            theorem1_rhs: sel[0].theorem1_rhs,
            coverage: sel.iter().filter(|r| r.empirical_gap <= r.theorem1_rhs).count() as f64 / sel.len() as f64,
            coverage_non_vacuous: coverage,
            unstable_seeds: sel.iter().filter(|r| r.objective_gap.is_infinite()).count(),
            median_projection_in: col(|r| r.projection_in)?,
            median_projection_out: col(|r| r.projection_out)?,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.median_gap).collect();
    let (obj_xs, objs): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.median_objective_gap.is_finite())
        .map(|r| (r.m as f64, r.median_objective_gap))
        .unzip();
    Ok(BoundSummary {
        gap_slope: loglog_slope(&xs, &gaps)?,
        objective_slope: loglog_slope(&obj_xs, &objs).ok(),
        objective_slope_points: objs.len(),
        rows,
    })
}

pub fn cmd_study_bounds(cfg: &RunConfig) -> Result<()> {
    let ds = strided_subset(&training_dataset(cfg)?, cfg.bounds.n)?;
    let reports = study_bounds(&ds, &study_options(cfg))?;
    write_bound_reports(&cfg.out.join("bounds.csv"), &reports)?;
    write_json(&cfg.out.join("bounds_summary.json"), &summarize_bounds(&reports)?)
}

#[derive(Serialize)]
struct DuffingControlRow {
    lifting: LiftingKind,
    m: usize,
    reached_ball: usize,
    diverged: usize,
    seeds: usize,
    cost: Spread,
}

#[derive(Serialize)]
struct DuffingForecastRow {
    m: usize,
    nystrom: Spread,
    thin_plate: Spread,
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let ds = training_dataset(cfg)?;
    match cfg.system.as_str() {
        "cubic" => {
            let rows = table1(&ds, cfg, &cfg.table_ms)?;
            write_json(&cfg.out.join("table1.json"), &rows)?;
            let mut w = csv::Writer::from_path(cfg.out.join("table1.csv"))?;
            w.write_record(["label", "m", "median", "p15", "p85", "rmse_u_median"])?;
            for r in &rows {
                w.write_record([
                    r.label.clone(),
                    r.m.to_string(),
                    crate::data::fmt_f64(r.cost.median),
                    crate::data::fmt_f64(r.cost.p15),
                    crate::data::fmt_f64(r.cost.p85),
                    r.rmse_u_pct.map(|s| crate::data::fmt_f64(s.median)).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            Ok(())
        }
        _ => {
            let sys = cfg.system_spec()?;
            let mut control = Vec::new();
            for kind in [LiftingKind::Nystrom, LiftingKind::ThinPlate] {
                let runs = sweep(&cfg.seeds, |seed| {
                    let model = fit_for_seed(&ds, cfg, kind, cfg.fit.m, seed)?;
                    Ok(control_run(&sys, &model, cfg, seed)?.0)
                })?;
                let horizon = cfg.lqr.steps;
                control.push(DuffingControlRow {
                    lifting: kind,
                    m: cfg.fit.m,
                    reached_ball: runs.iter().filter(|r| r.first_in_ball.is_some_and(|t| t <= horizon)).count(),
                    diverged: runs.iter().filter(|r| r.diverged.is_some()).count(),
                    seeds: runs.len(),
                    cost: Spread::of(&runs.iter().map(cost_of).collect::<Vec<_>>())?,
                });
            }
            let mut forecast = Vec::new();
            for &m in &cfg.forecast.ms {
                let ny = forecast_sweep(&ds, cfg, LiftingKind::Nystrom, m)?;
                let tp = forecast_sweep(&ds, cfg, LiftingKind::ThinPlate, m)?;
                forecast.push(DuffingForecastRow {
                    m,
                    nystrom: Spread::of(&ny.iter().map(|r| r.rmse_pct).collect::<Vec<_>>())?,
                    thin_plate: Spread::of(&tp.iter().map(|r| r.rmse_pct).collect::<Vec<_>>())?,
                });
            }
            write_json(&cfg.out.join("duffing_control.json"), &control)?;
            write_json(&cfg.out.join("duffing_forecast.json"), &forecast)
        }
    }
}

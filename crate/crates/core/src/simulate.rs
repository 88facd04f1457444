use std::fmt;
use std::sync::Arc;

use faer::{Mat, MatRef};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rng_for, Stream, Trajectory};
use crate::error::{Error, Result};
use crate::identify::KoopmanModel;
use crate::lqr::{Policy, RiccatiSolution};

pub type Rhs = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum SystemKind {
    /// `ẋ = −x³ + u`.
    Cubic,
    /// `ẋ₁ = x₂`, `ẋ₂ = −0.5x₂ − x₁(4x₁² − 1) + 0.5u`.
    Duffing,
    Custom(Rhs),
}

impl fmt::Debug for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SystemKind::Cubic => write!(f, "Cubic"),
            SystemKind::Duffing => write!(f, "Duffing"),
            SystemKind::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub d: usize,
    pub n_u: usize,
    pub dt: f64,
}

impl SystemSpec {
    pub fn cubic(dt: f64) -> Self {
        Self {
            kind: SystemKind::Cubic,
            d: 1,
            n_u: 1,
            dt,
        }
    }

    pub fn duffing(dt: f64) -> Self {
        Self {
            kind: SystemKind::Duffing,
            d: 2,
            n_u: 1,
            dt,
        }
    }

    pub fn custom(d: usize, n_u: usize, dt: f64, f: Rhs) -> Self {
        Self {
            kind: SystemKind::Custom(f),
            d,
            n_u,
            dt,
        }
    }

    pub fn by_name(name: &str, dt: f64) -> Result<Self> {
        match name {
            "cubic" => Ok(Self::cubic(dt)),
            "duffing" => Ok(Self::duffing(dt)),
            other => Err(Error::InvalidArgument(format!("unknown system `{other}`"))),
        }
    }

    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match &self.kind {
            SystemKind::Cubic => vec![-x[0].powi(3) + u[0]],
            SystemKind::Duffing => vec![x[1], -0.5 * x[1] - x[0] * (4.0 * x[0] * x[0] - 1.0) + 0.5 * u[0]],
            SystemKind::Custom(f) => f(x, u),
        }
    }
}

/// Classical RK4 with the control held over the step.
pub fn rk4_step(sys: &SystemSpec, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if x.len() != sys.d || u.len() != sys.n_u {
        return Err(Error::Dimension(format!(
            "system expects state {} and control {}, got {} and {}",
            sys.d,
            sys.n_u,
            x.len(),
            u.len()
        )));
    }
    if x.iter().chain(u).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 input".into()));
    }
    let h = sys.dt;
    let axpy = |base: &[f64], k: &[f64], s: f64| -> Vec<f64> { base.iter().zip(k).map(|(b, k)| b + s * k).collect() };
    let k1 = sys.rhs(x, u);
    let k2 = sys.rhs(&axpy(x, &k1, 0.5 * h), u);
    let k3 = sys.rhs(&axpy(x, &k2, 0.5 * h), u);
    let k4 = sys.rhs(&axpy(x, &k3, h), u);
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rk4 result".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLaw {
    Zero,
    UniformIid { lo: f64, hi: f64 },
    SquareWave { amplitude: f64, frequency: f64 },
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `amplitude · sign(sin(2πft))`.
pub fn square_wave(amplitude: f64, frequency: f64, t: f64) -> f64 {
    amplitude * sign((2.0 * std::f64::consts::PI * frequency * t).sin())
}

impl InputLaw {
    pub fn sample<R: Rng>(&self, step: usize, dt: f64, n_u: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            InputLaw::Zero => vec![0.0; n_u],
            InputLaw::UniformIid { lo, hi } => (0..n_u).map(|_| rng.random_range(lo..hi)).collect(),
            InputLaw::SquareWave { amplitude, frequency } => {
                vec![square_wave(amplitude, frequency, step as f64 * dt); n_u]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitLaw {
    Fixed { x0: Vec<f64> },
    UniformBox { lo: f64, hi: f64 },
    /// Uniform in the closed unit ball.
    UnitBall,
}

impl InitLaw {
    pub fn sample<R: Rng>(&self, d: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InitLaw::Fixed { x0 } => x0.clone(),
            InitLaw::UniformBox { lo, hi } => (0..d).map(|_| rng.random_range(*lo..*hi)).collect(),
            InitLaw::UnitBall => loop {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if x.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break x;
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub n_traj: usize,
    pub duration: f64,
    pub input_law: InputLaw,
    pub init_law: InitLaw,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub trajectories: Vec<Trajectory>,
    /// Indices of trajectories cut short by divergence.
    pub truncated: Vec<usize>,
}

pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub fn steps_for(duration: f64, dt: f64) -> Result<usize> {
    let s = duration / dt;
    if !(s >= 0.0) || (s - s.round()).abs() > 1e-9 * s.max(1.0) {
        return Err(Error::InvalidArgument(format!("duration {duration} is not a multiple of dt {dt}")));
    }
    Ok(s.round() as usize)
}

pub fn collect_training_data(sys: &SystemSpec, protocol: &Protocol) -> Result<Collection> {
    if protocol.n_traj == 0 {
        return Err(Error::InvalidArgument("at least one trajectory must be requested".into()));
    }
    let steps = steps_for(protocol.duration, sys.dt)?;
    let mut init_rng = rng_for(protocol.seed, Stream::InitialConditions);
    let mut input_rng = rng_for(protocol.seed, Stream::Inputs);
    let mut trajectories = Vec::with_capacity(protocol.n_traj);
    let mut truncated = Vec::new();
    for k in 0..protocol.n_traj {
        let x0 = protocol.init_law.sample(sys.d, &mut init_rng);
        let mut states = vec![x0];
        let mut controls = Vec::with_capacity(steps);
        for t in 0..steps {
            let u = protocol.input_law.sample(t, sys.dt, sys.n_u, &mut input_rng);
            let next = rk4_step(sys, &states[t], &u);
            match next {
                Ok(x) if norm(&x) <= DIVERGENCE_THRESHOLD => {
                    states.push(x);
                    controls.push(u);
                }
                _ => {
                    truncated.push(k);
                    break;
                }
            }
        }
        trajectories.push(Trajectory::new(sys.dt, states, controls)?);
    }
    Ok(Collection { trajectories, truncated })
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn quad(m: MatRef<'_, f64>, v: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            s += v[i] * m[(i, j)] * v[j];
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutResult {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    /// Step at which the state left the divergence ball or became non-finite.
    pub diverged: Option<usize>,
}

impl RolloutResult {
    /// Sum of per-step stage costs.
    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    /// Stage costs weighted by the sampling time.
    pub fn total_cost_dt(&self, dt: f64) -> f64 {
        dt * self.total_cost()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub steps: usize,
    pub qprime: Mat<f64>,
    pub r: Mat<f64>,
    pub reference: Option<Vec<f64>>,
    /// Stop once `‖x − r‖` falls below this value.
    pub stop_below: Option<f64>,
}

impl RolloutConfig {
    pub fn identity_weights(d: usize, n_u: usize, steps: usize) -> Self {
        Self {
            steps,
            qprime: Mat::identity(d, d),
            r: Mat::identity(n_u, n_u),
            reference: None,
            stop_below: None,
        }
    }
}

/// Closed loop on the true system under an arbitrary state feedback.
pub fn rollout_with<F>(sys: &SystemSpec, mut control: F, x0: &[f64], cfg: &RolloutConfig) -> Result<RolloutResult>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if x0.len() != sys.d {
        return Err(Error::Dimension(format!("initial state has dimension {}", x0.len())));
    }
    let r = cfg.reference.clone().unwrap_or_else(|| vec![0.0; sys.d]);
    let mut out = RolloutResult {
        states: vec![x0.to_vec()],
        controls: Vec::new(),
        stage_costs: Vec::new(),
        diverged: None,
    };
    for t in 0..cfg.steps {
        let x = out.states[t].clone();
        let err: Vec<f64> = x.iter().zip(&r).map(|(a, b)| a - b).collect();
        if cfg.stop_below.is_some_and(|thr| norm(&err) < thr) {
            break;
        }
        let u = control(&x);
        if u.iter().any(|v| !v.is_finite()) {
            out.diverged = Some(t);
            break;
        }
        out.stage_costs.push(quad(cfg.qprime.as_ref(), &err) + quad(cfg.r.as_ref(), &u));
        let next = rk4_step(sys, &x, &u);
        out.controls.push(u);
        match next {
            Ok(xn) if norm(&xn) <= DIVERGENCE_THRESHOLD => out.states.push(xn),
            _ => {
                out.diverged = Some(t + 1);
                break;
            }
        }
    }
    Ok(out)
}

/// Closed loop with `u = K z(x)` (or `K(z(x) − z(r))` for a reference).
pub fn rollout_closed_loop(
    sys: &SystemSpec,
    model: &KoopmanModel,
    sol: &RiccatiSolution,
    x0: &[f64],
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    if model.state_dim() != sys.d || model.control_dim() != sys.n_u {
        return Err(Error::Dimension("model and system dimensions differ".into()));
    }
    let policy = Policy::new(model, sol.k.as_ref(), cfg.reference.as_deref())?;
    rollout_with(sys, |x| policy.control(x), x0, cfg)
}

fn flat_pairs<'a>(a: &'a [Vec<f64>], b: &'a [Vec<f64>]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Dimension("sequences differ in shape".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (xi, yi) in x.iter().zip(y) {
            num += (yi - xi) * (yi - xi);
            den += xi * xi;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("reference sequence is identically zero".into()));
    }
    Ok((num, den))
}

/// `100 · √(Σ(x̂ − x)² / Σx²)`.
pub fn metric_rmse_pct(truth: &[Vec<f64>], forecast: &[Vec<f64>]) -> Result<f64> {
    let (num, den) = flat_pairs(truth, forecast)?;
    Ok(100.0 * (num / den).sqrt())
}

pub fn metric_rmse_u_pct(u: &[Vec<f64>], u_opt: &[Vec<f64>]) -> Result<f64> {
    metric_rmse_pct(u_opt, u)
}

/// `(1/T) Σ weight·‖x_t − r‖² + ‖u_t‖²` over the `T` applied controls.
pub fn metric_avg_running_cost(states: &[Vec<f64>], controls: &[Vec<f64>], r: &[f64], weight: f64) -> Result<f64> {
    if !(weight > 0.0) {
        return Err(Error::InvalidArgument("weight must be positive".into()));
    }
    if controls.is_empty() {
        return Ok(0.0);
    }
    if states.len() < controls.len() {
        return Err(Error::Dimension("fewer states than controls".into()));
    }
    let total: f64 = states
        .iter()
        .zip(controls)
        .map(|(x, u)| {
            let dx: f64 = x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            weight * dx + u.iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    Ok(total / controls.len() as f64)
}

/// `u = x³ − x√(1 + x⁴)`.
pub fn true_optimal_control_cubic(x: f64) -> f64 {
    x.powi(3) - x * (1.0 + x.powi(4)).sqrt()
}

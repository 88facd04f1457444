//! Flat dotted-key run configuration.
//!
//! A TOML document is flattened to keys such as `fit.gamma`; `--override`
//! entries replace keys after loading. Missing keys take system defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::Serialize;
use toml::Value;

use crate::data::SamplingStrategy;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::lqr::{DareMethod, DareOptions};
use crate::numerics::RankTolerance;
use crate::simulate::{InitLaw, InputLaw, Protocol, SystemSpec};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    let doc = format!("v = {text}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Malformed(format!("config: {e}")))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries);
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.entries.insert(key.to_string(), value);
    }

    /// Applies `KEY=VALUE`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` is not KEY=VALUE")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::InvalidArgument(format!("override `{spec}` has an empty key")));
        }
        self.set(k, parse_value(v.trim()));
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    fn bad(key: &str, want: &str) -> Error {
        Error::Malformed(format!("config key `{key}` must be {want}"))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Float(v)) => Ok(*v),
            Some(Value::Integer(v)) => Ok(*v as f64),
            Some(_) => Err(Self::bad(key, "a number")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(Self::bad(key, "a non-negative integer")),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.usize_or(key, default as usize)? as u64)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(v)) => Ok(*v),
            Some(_) => Err(Self::bad(key, "a boolean")),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(Value::String(v)) => Ok(v.clone()),
            Some(_) => Err(Self::bad(key, "a string")),
        }
    }

    pub fn opt_str(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(v)) => Ok(Some(v.clone())),
            Some(_) => Err(Self::bad(key, "a string")),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(Self::bad(key, "a list of numbers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(Value::Float(f)) => Ok(Some(vec![*f])),
            Some(Value::Integer(i)) => Ok(Some(vec![*i as f64])),
            Some(_) => Err(Self::bad(key, "a list of numbers")),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                    _ => Err(Self::bad(key, "a list of non-negative integers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(vec![*i as usize])),
            Some(_) => Err(Self::bad(key, "a list of non-negative integers")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftingKind {
    Nystrom,
    /// All training pairs as landmarks.
    Exact,
    ThinPlate,
}

impl std::str::FromStr for LiftingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nystrom" => Ok(Self::Nystrom),
            "exact" => Ok(Self::Exact),
            "thin_plate" | "splines" => Ok(Self::ThinPlate),
            other => Err(Error::InvalidArgument(format!("unknown lifting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    /// Existing trajectory CSV file or directory; simulated when absent.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub protocols: Vec<Protocol>,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lifting: LiftingKind,
    pub m: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub strategy: SamplingStrategy,
    pub tol: RankTolerance,
    pub cv: bool,
    pub cv_lengthscales: Vec<f64>,
    pub cv_gammas: Vec<f64>,
    pub cv_folds: usize,
}

#[derive(Debug, Clone)]
pub struct LqrConfig {
    pub qprime: Mat<f64>,
    pub r: Mat<f64>,
    pub x0: Vec<f64>,
    pub reference: Option<Vec<f64>>,
    pub steps: usize,
    pub stop_below: Option<f64>,
    pub zero_gain: bool,
    pub dare: DareOptions,
    /// Number of leading steps compared against the known optimal law.
    pub rmse_u_steps: usize,
    /// Radius used to report the first entry time into a ball around the reference.
    pub ball: f64,
}

#[derive(Debug, Clone)]
pub struct ForecastConfig {
    pub amplitude: f64,
    pub frequency: f64,
    pub duration: f64,
    pub ms: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BoundsConfig {
    pub n: usize,
    pub ms: Vec<usize>,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: String,
    pub dt: f64,
    pub data: DataConfig,
    pub kernel: KernelSpec,
    pub fit: FitConfig,
    pub model_path: Option<PathBuf>,
    pub lqr: LqrConfig,
    pub forecast: ForecastConfig,
    pub bounds: BoundsConfig,
    pub table_ms: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

fn diag(values: &[f64]) -> Mat<f64> {
    Mat::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { 0.0 })
}

fn input_law(cfg: &FlatConfig, key: &str, default: &str) -> Result<InputLaw> {
    let lo = cfg.f64_or(&format!("{key}.lo"), -1.0)?;
    let hi = cfg.f64_or(&format!("{key}.hi"), 1.0)?;
    match cfg.str_or(&format!("{key}.law"), default)?.as_str() {
        "zero" => Ok(InputLaw::Zero),
        "uniform" => {
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("{key}: lo must be below hi")));
            }
            Ok(InputLaw::UniformIid { lo, hi })
        }
        "square" => Ok(InputLaw::SquareWave {
            amplitude: cfg.f64_or(&format!("{key}.amplitude"), 1.0)?,
            frequency: cfg.f64_or(&format!("{key}.frequency"), 3.33)?,
        }),
        other => Err(Error::InvalidArgument(format!("unknown input law `{other}`"))),
    }
}

fn init_law(cfg: &FlatConfig, key: &str, default: &str) -> Result<InitLaw> {
    match cfg.str_or(&format!("{key}.law"), default)?.as_str() {
        "box" => {
            let lo = cfg.f64_or(&format!("{key}.lo"), -1.0)?;
            let hi = cfg.f64_or(&format!("{key}.hi"), 1.0)?;
            if !(lo < hi) {
                return Err(Error::InvalidArgument(format!("{key}: lo must be below hi")));
            }
            Ok(InitLaw::UniformBox { lo, hi })
        }
        "ball" => Ok(InitLaw::UnitBall),
        "fixed" => Ok(InitLaw::Fixed {
            x0: cfg
                .f64_list(&format!("{key}.x0"))?
                .ok_or_else(|| Error::Malformed(format!("{key}.x0 is required for a fixed law")))?,
        }),
        other => Err(Error::InvalidArgument(format!("unknown initial-state law `{other}`"))),
    }
}

/// Training protocols: one group for the cubic system, unforced and forced groups for Duffing.
fn protocols(cfg: &FlatConfig, system: &str, seed: u64) -> Result<Vec<Protocol>> {
    match system {
        "cubic" => Ok(vec![Protocol {
            n_traj: cfg.usize_or("data.n_traj", 20)?,
            duration: cfg.f64_or("data.duration", 2.0)?,
            input_law: input_law(cfg, "data.input", "uniform")?,
            init_law: init_law(cfg, "data.init", "box")?,
            seed,
        }]),
        "duffing" => Ok(vec![
            Protocol {
                n_traj: cfg.usize_or("data.unforced.n_traj", 100)?,
                duration: cfg.f64_or("data.unforced.duration", 5.0)?,
                input_law: InputLaw::Zero,
                init_law: init_law(cfg, "data.init", "ball")?,
                seed,
            },
            Protocol {
                n_traj: cfg.usize_or("data.forced.n_traj", 100)?,
                duration: cfg.f64_or("data.forced.duration", 2.0)?,
                input_law: input_law(cfg, "data.input", "uniform")?,
                init_law: init_law(cfg, "data.init", "ball")?,
                seed: seed.wrapping_add(1),
            },
        ]),
        other => Err(Error::InvalidArgument(format!("unknown system `{other}`"))),
    }
}

fn existing(path: Option<String>, base: &Path) -> Result<Option<PathBuf>> {
    let Some(p) = path else { return Ok(None) };
    let p = PathBuf::from(p);
    let p = if p.is_relative() { base.join(p) } else { p };
    if !p.exists() {
        return Err(Error::InvalidArgument(format!("referenced file {} does not exist", p.display())));
    }
    Ok(Some(p))
}

impl RunConfig {
    /// Relative paths in the document resolve against `base`.
    pub fn from_flat(cfg: &FlatConfig, base: &Path) -> Result<Self> {
        let system = cfg.str_or("system", "cubic")?;
        let dt = cfg.f64_or("dt", 0.01)?;
        let sys = SystemSpec::by_name(&system, dt)?;
        let cubic = system == "cubic";
        let data_seed = cfg.u64_or("data.seed", 0)?;
        let data = DataConfig {
            path: existing(cfg.opt_str("data.path")?, base)?,
            seed: data_seed,
            protocols: protocols(cfg, &system, data_seed)?,
        };
        let family: KernelFamily = cfg.str_or("kernel.family", "matern52")?.parse()?;
        let kernel = KernelSpec::new(
            family,
            cfg.f64_or("kernel.lengthscale", 1.0)?,
            cfg.f64_or("kernel.variance", 1.0)?,
        )?;
        let gamma = cfg.f64_or("fit.gamma", 1e-6)?;
        let fit = FitConfig {
            lifting: cfg.str_or("fit.lifting", "nystrom")?.parse()?,
            m: cfg.usize_or("fit.m", if cubic { 100 } else { 20 })?,
            gamma,
            lambda: cfg.f64_or("fit.lambda", gamma)?,
            strategy: cfg.str_or("fit.strategy", if cubic { "independent" } else { "shared" })?.parse()?,
            tol: RankTolerance::new(cfg.f64_or("fit.rank_tol", 1e-10)?)?,
            cv: cfg.bool_or("fit.cv", false)?,
            cv_lengthscales: cfg.f64_list("fit.cv_lengthscales")?.unwrap_or_else(|| vec![0.5, 1.0, 2.0]),
            cv_gammas: cfg.f64_list("fit.cv_gammas")?.unwrap_or_else(|| vec![1e-8, 1e-6, 1e-4]),
            cv_folds: cfg.usize_or("fit.cv_folds", 5)?,
        };
        let q = cfg.f64_list("lqr.q")?.unwrap_or_else(|| vec![1.0; sys.d]);
        let r = cfg.f64_list("lqr.r")?.unwrap_or_else(|| vec![1.0; sys.n_u]);
        if q.len() != sys.d || r.len() != sys.n_u {
            return Err(Error::Dimension("lqr.q and lqr.r must match the system dimensions".into()));
        }
        let x0 = cfg
            .f64_list("lqr.x0")?
            .unwrap_or_else(|| if cubic { vec![0.9] } else { vec![-0.5, 0.0] });
        if x0.len() != sys.d {
            return Err(Error::Dimension("lqr.x0 must match the state dimension".into()));
        }
        let reference = cfg.f64_list("lqr.reference")?;
        if reference.as_ref().is_some_and(|r| r.len() != sys.d) {
            return Err(Error::Dimension("lqr.reference must match the state dimension".into()));
        }
        let stop = cfg.f64_or("lqr.stop_below", if cubic { 1e-6 } else { 0.0 })?;
        let method = match cfg.str_or("lqr.method", "doubling")?.as_str() {
            "doubling" => DareMethod::Doubling,
            "fixed_point" => DareMethod::FixedPoint,
            other => return Err(Error::InvalidArgument(format!("unknown DARE method `{other}`"))),
        };
        let lqr = LqrConfig {
            qprime: diag(&q),
            r: diag(&r),
            x0,
            reference,
            steps: cfg.usize_or("lqr.steps", if cubic { 10_000 } else { 500 })?,
            stop_below: (stop > 0.0).then_some(stop),
            zero_gain: cfg.bool_or("lqr.zero_gain", false)?,
            dare: DareOptions {
                tol: cfg.f64_or("lqr.tol", 1e-12)?,
                max_iter: cfg.usize_or("lqr.max_iter", 1_000_000)?,
                method,
            },
            rmse_u_steps: cfg.usize_or("lqr.rmse_u_steps", 200)?,
            ball: cfg.f64_or("lqr.ball", 0.05)?,
        };
        let forecast = ForecastConfig {
            amplitude: cfg.f64_or("forecast.amplitude", 1.0)?,
            frequency: cfg.f64_or("forecast.frequency", 3.33)?,
            duration: cfg.f64_or("forecast.duration", 2.0)?,
            ms: cfg.usize_list("forecast.ms")?.unwrap_or_else(|| vec![10, 20, 40, 80]),
        };
        let bounds = BoundsConfig {
            n: cfg.usize_or("bounds.n", 500)?,
            ms: cfg.usize_list("bounds.ms")?.unwrap_or_else(|| vec![10, 20, 40, 80, 160]),
            delta: cfg.f64_or("bounds.delta", 0.05)?,
        };
        let seeds: Vec<u64> = match cfg.usize_list("seeds")? {
            Some(list) => list.into_iter().map(|s| s as u64).collect(),
            None => {
                let start = cfg.u64_or("seeds_start", 0)?;
                let count = cfg.u64_or("seeds_count", 1)?;
                (start..start + count).collect()
            }
        };
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        Ok(Self {
            system,
            dt,
            data,
            kernel,
            fit,
            model_path: existing(cfg.opt_str("model.path")?, base)?,
            lqr,
            forecast,
            bounds,
            table_ms: cfg.usize_list("bench.ms")?.unwrap_or_else(|| vec![10, 50, 100]),
            seeds,
            out: PathBuf::from(cfg.str_or("out", "out")?),
        })
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        SystemSpec::by_name(&self.system, self.dt)
    }
}

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::{self, Lifting};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::numerics::RankTolerance;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Landmarks = 1,
    Inputs = 2,
    InitialConditions = 3,
    Evaluation = 4,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if states.is_empty() {
            return Err(Error::Empty("trajectory states".into()));
        }
        if controls.len() + 1 != states.len() {
            return Err(Error::Dimension(format!(
                "{} states need {} controls, got {}",
                states.len(),
                states.len() - 1,
                controls.len()
            )));
        }
        let d = states[0].len();
        if d == 0 || states.iter().any(|s| s.len() != d) {
            return Err(Error::Dimension("inconsistent state dimension".into()));
        }
        let nu = controls.first().map_or(0, Vec::len);
        if controls.iter().any(|u| u.len() != nu) {
            return Err(Error::Dimension("inconsistent control dimension".into()));
        }
        if states.iter().chain(&controls).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory sample".into()));
        }
        Ok(Self { dt, states, controls })
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn control_dim(&self) -> Option<usize> {
        self.controls.first().map(Vec::len)
    }
}

/// Regression triples `(x_i, u_i, x_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub xs: Vec<Vec<f64>>,
    pub us: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub d: usize,
    pub n_u: usize,
}

impl Dataset {
    pub fn new(xs: Vec<Vec<f64>>, us: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        if xs.len() != us.len() || xs.len() != ys.len() {
            return Err(Error::Dimension("inputs, controls and outputs differ in length".into()));
        }
        let d = xs[0].len();
        let n_u = us[0].len();
        if xs.iter().chain(&ys).any(|x| x.len() != d) || us.iter().any(|u| u.len() != n_u) {
            return Err(Error::Dimension("inconsistent pair dimensions".into()));
        }
        Ok(Self { xs, us, ys, d, n_u })
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            us: idx.iter().map(|&i| self.us[i].clone()).collect(),
            ys: idx.iter().map(|&i| self.ys[i].clone()).collect(),
            d: self.d,
            n_u: self.n_u,
        }
    }
}

pub fn build_pairs(trajs: &[Trajectory]) -> Result<Dataset> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectory list".into()));
    }
    let d = trajs[0].state_dim();
    let mut n_u = None;
    let (mut xs, mut us, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (k, t) in trajs.iter().enumerate() {
        if t.states.len() < 2 {
            return Err(Error::InvalidArgument(format!("trajectory {k} has fewer than 2 states")));
        }
        if t.state_dim() != d {
            return Err(Error::Dimension(format!("trajectory {k} has state dimension {}", t.state_dim())));
        }
        let nu = t.control_dim().unwrap_or(0);
        if *n_u.get_or_insert(nu) != nu {
            return Err(Error::Dimension(format!("trajectory {k} has control dimension {nu}")));
        }
        for i in 0..t.controls.len() {
            xs.push(t.states[i].clone());
            us.push(t.controls[i].clone());
            ys.push(t.states[i + 1].clone());
        }
    }
    Dataset::new(xs, us, ys)
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectories_to<W: Write>(w: W, trajs: &[Trajectory]) -> Result<()> {
    let first = trajs.first().ok_or_else(|| Error::Empty("trajectory list".into()))?;
    let d = first.state_dim();
    let nu = trajs.iter().find_map(Trajectory::control_dim).unwrap_or(0);
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|i| format!("x_{i}")));
    header.extend((1..=nu).map(|i| format!("u_{i}")));
    wtr.write_record(&header)?;
    for (id, t) in trajs.iter().enumerate() {
        for (k, x) in t.states.iter().enumerate() {
            let mut row = vec![id.to_string(), fmt_f64(k as f64 * t.dt)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match t.controls.get(k) {
                Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), nu)),
            }
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trajectories_to(std::io::BufWriter::new(f), trajs)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories_from(std::fs::File::open(path)?)
}

pub fn read_trajectories_from<R: Read>(r: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("traj_id") || header.get(1) != Some("t") {
        return Err(Error::Malformed("header must start with traj_id,t".into()));
    }
    let mut d = 0;
    let mut nu = 0;
    for (i, name) in header.iter().enumerate().skip(2) {
        if name == format!("x_{}", d + 1) && nu == 0 {
            d += 1;
        } else if name == format!("u_{}", nu + 1) {
            nu += 1;
        } else {
            return Err(Error::Malformed(format!("unexpected column `{name}` at position {i}")));
        }
    }
    if d == 0 {
        return Err(Error::Malformed("no state columns".into()));
    }
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Malformed(format!("line {line}: cannot parse `{s}`")))
    };
    type Row = (f64, Vec<f64>, Option<Vec<f64>>);
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Malformed(format!("line {line}: {e}")))?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::Malformed(format!("line {line}: missing trajectory id")));
        }
        let t = parse(&rec[1], line)?;
        let x = (0..d).map(|i| parse(&rec[2 + i], line)).collect::<Result<Vec<_>>>()?;
        let ufields: Vec<&str> = (0..nu).map(|i| rec[2 + d + i].trim()).collect();
        let u = if ufields.iter().all(|s| s.is_empty()) {
            None
        } else if ufields.iter().any(|s| s.is_empty()) {
            return Err(Error::Malformed(format!("line {line}: partially empty control")));
        } else {
            Some(ufields.iter().map(|s| parse(s, line)).collect::<Result<Vec<_>>>()?)
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((t, x, u));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if rows.len() < 2 {
            return Err(Error::Malformed(format!("trajectory {id} has a single row")));
        }
        let dt = (rows[rows.len() - 1].0 - rows[0].0) / (rows.len() - 1) as f64;
        let mut states = Vec::with_capacity(rows.len());
        let mut controls = Vec::with_capacity(rows.len() - 1);
        let last = rows.len() - 1;
        for (k, (_, x, u)) in rows.into_iter().enumerate() {
            states.push(x);
            match (k < last, u) {
                (true, Some(u)) => controls.push(u),
                (true, None) if nu == 0 => controls.push(Vec::new()),
                (true, None) => {
                    return Err(Error::Malformed(format!("trajectory {id}: missing control at row {k}")))
                }
                (false, _) => {}
            }
        }
        out.push(Trajectory::new(dt, states, controls)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    IndependentUniform,
    PairedOneStepAhead,
    /// One draw from the training outputs, used for both sides.
    SharedOutput,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" | "independent_uniform" => Ok(Self::IndependentUniform),
            "paired" | "paired_one_step_ahead" => Ok(Self::PairedOneStepAhead),
            "shared" | "shared_output" => Ok(Self::SharedOutput),
            other => Err(Error::InvalidArgument(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LandmarkSet {
    pub fn m(&self) -> usize {
        self.outputs.len()
    }

    /// Every training input and output, in order.
    pub fn full(ds: &Dataset) -> Self {
        Self {
            inputs: ds.xs.clone(),
            outputs: ds.ys.clone(),
            seed: 0,
        }
    }
}

pub fn sample_landmarks(ds: &Dataset, m: usize, strategy: SamplingStrategy, seed: u64) -> Result<LandmarkSet> {
    let n = ds.n();
    if m < 1 || m > n {
        return Err(Error::InvalidArgument(format!("need 1 <= m <= n = {n}, got m = {m}")));
    }
    let mut rng = rng_for(seed, Stream::Landmarks);
    let idx_in = rand::seq::index::sample(&mut rng, n, m).into_vec();
    let idx_out = match strategy {
        SamplingStrategy::IndependentUniform => rand::seq::index::sample(&mut rng, n, m).into_vec(),
        SamplingStrategy::PairedOneStepAhead | SamplingStrategy::SharedOutput => idx_in.clone(),
    };
    let in_side = match strategy {
        SamplingStrategy::SharedOutput => &ds.ys,
        _ => &ds.xs,
    };
    Ok(LandmarkSet {
        inputs: idx_in.iter().map(|&i| in_side[i].clone()).collect(),
        outputs: idx_out.iter().map(|&i| ds.ys[i].clone()).collect(),
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub family: KernelFamily,
    pub variance: f64,
    pub folds: usize,
    pub m: usize,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    pub tol: RankTolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvCell {
    pub lengthscale: f64,
    pub gamma: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub best: CvCell,
    pub cells: Vec<CvCell>,
}

/// Contiguous fold boundaries over `n` pairs.
pub fn fold_ranges(n: usize, folds: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument("at least 2 folds are required".into()));
    }
    if n < folds {
        return Err(Error::InvalidArgument(format!("{n} pairs cannot fill {folds} folds")));
    }
    Ok((0..folds).map(|k| (k * n / folds)..((k + 1) * n / folds)).collect())
}

/// Model fitted with the pairs in `held` left out.
pub fn fold_model(
    ds: &Dataset,
    held: std::ops::Range<usize>,
    kernel: KernelSpec,
    gamma: f64,
    opts: &CvOptions,
) -> Result<identify::KoopmanModel> {
    let train_idx: Vec<usize> = (0..ds.n()).filter(|i| !held.contains(i)).collect();
    let train = ds.subset(&train_idx);
    let m = opts.m.min(train.n());
    let lm = sample_landmarks(&train, m, opts.strategy, opts.seed)?;
    identify::fit(&train, &Lifting::Nystrom { kernel, landmarks: lm }, gamma, gamma, opts.tol)
}

fn cell_score(ds: &Dataset, lengthscale: f64, gamma: f64, opts: &CvOptions) -> Result<f64> {
    let kernel = KernelSpec::new(opts.family, lengthscale, opts.variance)?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for held in fold_ranges(ds.n(), opts.folds)? {
        let model = fold_model(ds, held.clone(), kernel, gamma, opts)?;
        for i in held {
            let z = model.embed_state(&ds.xs[i])?;
            let z1 = model.predict_step(&z, &ds.us[i])?;
            let xh = model.reconstruct(&z1);
            sse += xh.iter().zip(&ds.ys[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += 1;
        }
    }
    Ok(sse / count as f64)
}

/// Grid search over `(lengthscale, γ)` with contiguous folds and `λ = γ`.
pub fn cross_validate(ds: &Dataset, grid: &[(f64, f64)], opts: &CvOptions) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Empty("cross-validation grid".into()));
    }
    fold_ranges(ds.n(), opts.folds)?;
    let cells = grid
        .par_iter()
        .map(|&(l, g)| {
            cell_score(ds, l, g, opts).map(|score| CvCell {
                lengthscale: l,
                gamma: g,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = *cells
        .iter()
        .min_by(|a, b| {
            let sa = if a.score.is_nan() { f64::INFINITY } else { a.score };
            let sb = if b.score.is_nan() { f64::INFINITY } else { b.score };
            sa.total_cmp(&sb)
                .then(b.gamma.total_cmp(&a.gamma))
                .then(b.lengthscale.total_cmp(&a.lengthscale))
        })
        .expect("grid is nonempty");
    Ok(CvResult { best, cells })
}

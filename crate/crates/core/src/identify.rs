use std::collections::HashSet;
use std::path::Path;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LandmarkSet};
use crate::error::{Error, Result};
use crate::kernels::{gram, thin_plate_unchecked, KernelSpec};
use crate::numerics::{self, check_finite, hcat, matvec, mat_from_rows, psd_range, solve_psd, symmetrize, RankTolerance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lifting {
    Nystrom { kernel: KernelSpec, landmarks: LandmarkSet },
    ThinPlate { centers: Vec<Vec<f64>> },
}

impl Lifting {
    fn validate(&self, d: usize) -> Result<()> {
        let pts: Vec<&Vec<f64>> = match self {
            Lifting::Nystrom { landmarks, .. } => {
                if landmarks.inputs.is_empty() || landmarks.outputs.is_empty() {
                    return Err(Error::Empty("landmark set".into()));
                }
                landmarks.inputs.iter().chain(&landmarks.outputs).collect()
            }
            Lifting::ThinPlate { centers } => {
                if centers.is_empty() {
                    return Err(Error::Empty("thin-plate centers".into()));
                }
                centers.iter().collect()
            }
        };
        if pts.iter().any(|p| p.len() != d) {
            return Err(Error::Dimension(format!("lifting points must have dimension {d}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n: usize,
    pub rank_in: usize,
    pub rank_out: usize,
    pub cond_in: Option<f64>,
    pub cond_out: Option<f64>,
    pub clipped_in: usize,
    pub clipped_out: usize,
    pub duplicates_removed: usize,
    pub jitter_used: bool,
    /// Mean squared one-step residual of the lifted ridge regression.
    pub train_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub lifting: Lifting,
    pub a: Mat<f64>,
    pub b: Mat<f64>,
    pub c: Mat<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub gram_out_pinv_sqrt: Mat<f64>,
    /// Orthonormal basis of the range of `gram_out_pinv_sqrt` (all of `ℝ^m` for splines).
    pub out_basis: Mat<f64>,
    pub diagnostics: FitDiagnostics,
}

/// `V diag(λ^{-1/2})`.
fn scale_columns(v: &Mat<f64>, values: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / values[j].sqrt())
}

/// Drops exact repeats, keeping first occurrences.
pub fn dedupe_points(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, usize) {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let key: Vec<u64> = p.iter().map(|v| (v + 0.0).to_bits()).collect();
        if seen.insert(key) {
            out.push(p.clone());
        }
    }
    let removed = points.len() - out.len();
    (out, removed)
}

/// Training controls as an `n × n_u` matrix (unscaled).
pub fn control_matrix(ds: &Dataset) -> Mat<f64> {
    Mat::from_fn(ds.n(), ds.n_u, |i, j| ds.us[i][j])
}

/// Ridge solution `T = Yᵀ F (FᵀF + s I)^{-1}` together with the mean squared residual.
fn ridge(f: MatRef<'_, f64>, y: MatRef<'_, f64>, s: f64) -> Result<(Mat<f64>, bool, f64)> {
    let mut big = f.transpose() * f;
    numerics::add_diagonal(&mut big, s);
    let rhs = f.transpose() * y;
    let (sol, jitter) = solve_psd(big.as_ref(), rhs.as_ref())?;
    let resid = y - f * &sol;
    let n = f.nrows().max(1) as f64;
    let risk = resid.norm_l2().powi(2) / n;
    Ok((sol.transpose().to_owned(), jitter, risk))
}

pub fn fit(ds: &Dataset, lifting: &Lifting, gamma: f64, lambda: f64, tol: RankTolerance) -> Result<KoopmanModel> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    lifting.validate(ds.d)?;
    match lifting {
        Lifting::Nystrom { kernel, landmarks } => fit_nystrom(ds, kernel, landmarks, gamma, lambda, tol),
        Lifting::ThinPlate { centers } => fit_thin_plate(ds, centers, gamma, lambda),
    }
}

fn fit_nystrom(
    ds: &Dataset,
    kernel: &KernelSpec,
    landmarks: &LandmarkSet,
    gamma: f64,
    lambda: f64,
    tol: RankTolerance,
) -> Result<KoopmanModel> {
    let n = ds.n();
    let nf = n as f64;
    let (inputs, dup_in) = dedupe_points(&landmarks.inputs);
    let (outputs, dup_out) = dedupe_points(&landmarks.outputs);

    let k_out = gram(kernel, &outputs, &outputs)?;
    let r_out = psd_range(k_out.as_ref(), tol)?;
    let k_in = gram(kernel, &inputs, &inputs)?;
    let r_in = psd_range(k_in.as_ref(), tol)?;
    drop((k_out, k_in));
    // K^{†1/2} = E Vᵀ with E = V Λ^{-1/2}; all products below stay rank-r.
    let e_out = scale_columns(&r_out.basis, &r_out.values);
    let e_in = scale_columns(&r_in.basis, &r_in.values);
    let kps = symmetrize((&e_out * r_out.basis.transpose()).as_ref());

    // Reduced whitened coordinates: W_out = W_r V_outᵀ, input features [F_r V_inᵀ | U].
    let w_r = gram(kernel, &ds.ys, &outputs)? * &e_out;
    let f_r = gram(kernel, &ds.xs, &inputs)? * &e_in;
    let f = hcat(f_r.as_ref(), control_matrix(ds).as_ref());
    drop(f_r);
    let (s_red, jitter, train_risk) = ridge(f.as_ref(), w_r.as_ref(), gamma * nf)?;
    drop(f);
    let r_i = r_in.rank();
    let k_io = e_in.transpose() * (gram(kernel, &inputs, &outputs)? * &e_out);
    let a_red = s_red.subcols(0, r_i) * &k_io;
    let a = &r_out.basis * &a_red * r_out.basis.transpose();
    let b = &r_out.basis * s_red.subcols(r_i, ds.n_u);

    let y = mat_from_rows(&ds.ys);
    let (c_red, jitter_c, _) = ridge(w_r.as_ref(), y.as_ref(), lambda * nf)?;
    let c = c_red * r_out.basis.transpose();

    check_finite(a.as_ref(), "A")?;
    check_finite(b.as_ref(), "B")?;
    check_finite(c.as_ref(), "C")?;
    let diagnostics = FitDiagnostics {
        n,
        rank_in: r_in.rank(),
        rank_out: r_out.rank(),
        cond_in: Some(r_in.condition_number()).filter(|c| c.is_finite()),
        cond_out: Some(r_out.condition_number()).filter(|c| c.is_finite()),
        clipped_in: r_in.dropped,
        clipped_out: r_out.dropped,
        duplicates_removed: dup_in + dup_out,
        jitter_used: jitter || jitter_c,
        train_risk,
    };
    Ok(KoopmanModel {
        lifting: Lifting::Nystrom {
            kernel: *kernel,
            landmarks: LandmarkSet {
                inputs,
                outputs,
                seed: landmarks.seed,
            },
        },
        a,
        b,
        c,
        gamma,
        lambda,
        gram_out_pinv_sqrt: kps,
        out_basis: r_out.basis,
        diagnostics,
    })
}

fn features(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Mat<f64> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| thin_plate_unchecked(p, centers)).collect();
    mat_from_rows(&rows)
}

fn fit_thin_plate(ds: &Dataset, centers: &[Vec<f64>], gamma: f64, lambda: f64) -> Result<KoopmanModel> {
    let n = ds.n();
    let m = centers.len();
    let phi_out = features(&ds.ys, centers);
    let f = hcat(features(&ds.xs, centers).as_ref(), control_matrix(ds).as_ref());
    let (t, jitter, train_risk) = ridge(f.as_ref(), phi_out.as_ref(), gamma * n as f64)?;
    let a = t.subcols(0, m).to_owned();
    let b = t.subcols(m, ds.n_u).to_owned();
    let y = mat_from_rows(&ds.ys);
    let (c, jitter_c, _) = ridge(phi_out.as_ref(), y.as_ref(), lambda * n as f64)?;
    check_finite(a.as_ref(), "A")?;
    check_finite(c.as_ref(), "C")?;
    Ok(KoopmanModel {
        lifting: Lifting::ThinPlate { centers: centers.to_vec() },
        a,
        b,
        c,
        gamma,
        lambda,
        gram_out_pinv_sqrt: Mat::identity(m, m),
        out_basis: Mat::identity(m, m),
        diagnostics: FitDiagnostics {
            n,
            rank_in: m,
            rank_out: m,
            jitter_used: jitter || jitter_c,
            train_risk,
            ..Default::default()
        },
    })
}

impl KoopmanModel {
    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Raw lifting features before the Gram whitening (kernel sections or spline features).
    pub fn raw_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(match &self.lifting {
            Lifting::Nystrom { kernel, landmarks } => kernel.sections(x, &landmarks.outputs),
            Lifting::ThinPlate { centers } => thin_plate_unchecked(x, centers),
        })
    }

    pub fn embed_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_features(x)?;
        Ok(match self.lifting {
            Lifting::Nystrom { .. } => matvec(self.gram_out_pinv_sqrt.as_ref(), &raw),
            Lifting::ThinPlate { .. } => raw,
        })
    }

    pub fn predict_step(&self, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.m() || u.len() != self.control_dim() {
            return Err(Error::Dimension(format!(
                "expected lifted state {} and control {}, got {} and {}",
                self.m(),
                self.control_dim(),
                z.len(),
                u.len()
            )));
        }
        let mut out = matvec(self.a.as_ref(), z);
        for (o, v) in out.iter_mut().zip(matvec(self.b.as_ref(), u)) {
            *o += v;
        }
        Ok(out)
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        matvec(self.c.as_ref(), z)
    }

    /// Open-loop forecast `x̂_1..x̂_T` from `x0` under the given controls.
    pub fn forecast(&self, x0: &[f64], controls: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut z = self.embed_state(x0)?;
        let mut out = Vec::with_capacity(controls.len());
        for (t, u) in controls.iter().enumerate() {
            z = self.predict_step(&z, u)?;
            let x = self.reconstruct(&z);
            if z.iter().chain(&x).any(|v| !v.is_finite()) {
                return Err(Error::Diverged(t + 1));
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(text)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat<f64>> for MatrixDoc {
    fn from(m: &Mat<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixDoc {
    pub fn to_mat(&self) -> Result<Mat<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Malformed(format!(
                "matrix declares {}x{} but stores {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Mat::from_fn(self.rows, self.cols, |i, j| self.data[i * self.cols + j]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDoc {
    lifting: Lifting,
    a: MatrixDoc,
    b: MatrixDoc,
    c: MatrixDoc,
    gamma: f64,
    lambda: f64,
    gram_out_pinv_sqrt: MatrixDoc,
    out_basis: MatrixDoc,
    diagnostics: FitDiagnostics,
}

impl From<&KoopmanModel> for ModelDoc {
    fn from(m: &KoopmanModel) -> Self {
        Self {
            lifting: m.lifting.clone(),
            a: (&m.a).into(),
            b: (&m.b).into(),
            c: (&m.c).into(),
            gamma: m.gamma,
            lambda: m.lambda,
            gram_out_pinv_sqrt: (&m.gram_out_pinv_sqrt).into(),
            out_basis: (&m.out_basis).into(),
            diagnostics: m.diagnostics.clone(),
        }
    }
}

impl TryFrom<ModelDoc> for KoopmanModel {
    type Error = Error;

    fn try_from(d: ModelDoc) -> Result<Self> {
        let model = KoopmanModel {
            lifting: d.lifting,
            a: d.a.to_mat()?,
            b: d.b.to_mat()?,
            c: d.c.to_mat()?,
            gamma: d.gamma,
            lambda: d.lambda,
            gram_out_pinv_sqrt: d.gram_out_pinv_sqrt.to_mat()?,
            out_basis: d.out_basis.to_mat()?,
            diagnostics: d.diagnostics,
        };
        let m = model.m();
        if model.a.ncols() != m || model.b.nrows() != m || model.c.ncols() != m || model.gram_out_pinv_sqrt.nrows() != m
            || model.out_basis.nrows() != m
        {
            return Err(Error::Malformed("model matrices have inconsistent shapes".into()));
        }
        Ok(model)
    }
}

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::{KoopmanModel, Lifting};
use crate::numerics::{
    self, check_finite, matvec, operator_norm_sym, solve_psd, spectral_radius, sym_eigen, symmetrize,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: Mat<f64>,
    pub r: Mat<f64>,
}

impl LqrWeights {
    pub fn new(q: Mat<f64>, r: Mat<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || r.nrows() != r.ncols() {
            return Err(Error::Dimension("Q and R must be square".into()));
        }
        let q = symmetrize(q.as_ref());
        let r = symmetrize(r.as_ref());
        if q.nrows() > 0 {
            let eq = sym_eigen(q.as_ref())?;
            let scale = eq.values.iter().map(|v| v.abs()).fold(1.0, f64::max);
            if eq.values[0] < -1e-10 * scale {
                return Err(Error::InvalidArgument(format!("Q is not PSD (min eigenvalue {})", eq.values[0])));
            }
        }
        if r.nrows() > 0 {
            let er = sym_eigen(r.as_ref())?;
            if er.values[0] <= 0.0 {
                return Err(Error::InvalidArgument(format!("R is not PD (min eigenvalue {})", er.values[0])));
            }
        }
        Ok(Self { q, r })
    }
}

/// `Q_m = Cᵀ Q' C` with the given control weight.
pub fn build_weights(model: &KoopmanModel, qprime: MatRef<'_, f64>, r: MatRef<'_, f64>) -> Result<LqrWeights> {
    let d = model.state_dim();
    if qprime.nrows() != d || qprime.ncols() != d {
        return Err(Error::Dimension(format!("Q' must be {d}x{d}")));
    }
    let nu = model.control_dim();
    if r.nrows() != nu || r.ncols() != nu {
        return Err(Error::Dimension(format!("R must be {nu}x{nu}")));
    }
    let q = model.c.transpose() * qprime * &model.c;
    LqrWeights::new(q, r.to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DareMethod {
    /// One value-iteration step at a time.
    FixedPoint,
    /// The same iterates sampled at indices `2^k`, reached by squaring.
    Doubling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: DareMethod,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
            method: DareMethod::Doubling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Mat<f64>,
    pub k: Mat<f64>,
    pub l: Mat<f64>,
    pub residual: f64,
    pub rho_l: f64,
    pub iterations: usize,
}

fn check_shapes(a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights) -> Result<()> {
    let m = a.nrows();
    if a.ncols() != m || b.nrows() != m || w.q.nrows() != m || w.r.nrows() != b.ncols() {
        return Err(Error::Dimension(format!(
            "A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            w.q.nrows(),
            w.q.ncols(),
            w.r.nrows(),
            w.r.ncols()
        )));
    }
    Ok(())
}

/// `K = −(R + BᵀPB)^{-1} BᵀPA`.
pub fn gain(p: MatRef<'_, f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>, r: MatRef<'_, f64>) -> Result<Mat<f64>> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let g = &btp * a;
    let (x, _) = solve_psd(s.as_ref(), g.as_ref()).map_err(|e| Error::Singular(format!("R + BᵀPB: {e}")))?;
    Ok(numerics::scaled(x.as_ref(), -1.0))
}

/// One value-iteration step `AᵀPA − AᵀPB(R+BᵀPB)^{-1}BᵀPA + Q`.
pub fn riccati_step(p: MatRef<'_, f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights) -> Result<Mat<f64>> {
    let k = gain(p, a, b, w.r.as_ref())?;
    let btpa = b.transpose() * p * a;
    let next = a.transpose() * p * a + btpa.transpose() * &k + &w.q;
    Ok(symmetrize(next.as_ref()))
}

/// `‖F(P, A, B)‖₂` with `F = P − Aᵀ[P − PB(R+BᵀPB)^{-1}BᵀP]A − Q`.
pub fn dare_residual(p: MatRef<'_, f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights) -> Result<f64> {
    check_shapes(a, b, w)?;
    let next = riccati_step(p, a, b, w)?;
    operator_norm_sym((p - &next).as_ref())
}

fn frob(m: MatRef<'_, f64>) -> f64 {
    m.norm_l2()
}

/// Spectral-norm test `‖Δ‖₂ ≤ tol(1 + ‖P‖₂)`, filtered by cheap Frobenius bounds.
fn step_small(delta: MatRef<'_, f64>, p: MatRef<'_, f64>, tol: f64) -> Result<(bool, f64)> {
    let dim = (p.nrows().max(1) as f64).sqrt();
    let (df, pf) = (frob(delta), frob(p));
    if df <= tol * (1.0 + pf / dim) {
        return Ok((true, df));
    }
    if df / dim > tol * (1.0 + pf) {
        return Ok((false, df));
    }
    let d2 = operator_norm_sym(delta)?;
    Ok((d2 <= tol * (1.0 + operator_norm_sym(p)?), d2))
}

fn finish(p: Mat<f64>, a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights, iterations: usize) -> Result<RiccatiSolution> {
    check_finite(p.as_ref(), "riccati iterate")?;
    let k = gain(p.as_ref(), a, b, w.r.as_ref())?;
    let l = a + b * &k;
    let residual = dare_residual(p.as_ref(), a, b, w)?;
    let rho_l = spectral_radius(l.as_ref())?;
    Ok(RiccatiSolution {
        p,
        k,
        l,
        residual,
        rho_l,
        iterations,
    })
}

fn not_converged(
    p: Mat<f64>,
    a: MatRef<'_, f64>,
    b: MatRef<'_, f64>,
    w: &LqrWeights,
    iterations: usize,
    last_step: f64,
) -> Error {
    match finish(p, a, b, w, iterations) {
        Ok(sol) => Error::NotConverged {
            iterations,
            last_step,
            last: Box::new(sol),
        },
        Err(e) => e,
    }
}

/// Riccati value iteration from `P₀ = Q` until `‖P_{k+1} − P_k‖₂ ≤ tol(1 + ‖P_k‖₂)`.
///
/// On non-convergence the error carries the last iterate.
pub fn solve_dare(a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights, opts: &DareOptions) -> Result<RiccatiSolution> {
    check_shapes(a, b, w)?;
    check_finite(a, "A")?;
    check_finite(b, "B")?;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidArgument("tol must be positive and max_iter at least 1".into()));
    }
    match opts.method {
        DareMethod::FixedPoint => fixed_point(a, b, w, opts),
        DareMethod::Doubling => doubling(a, b, w, opts),
    }
}

fn fixed_point(a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights, opts: &DareOptions) -> Result<RiccatiSolution> {
    let mut p = w.q.clone();
    let mut last = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = riccati_step(p.as_ref(), a, b, w)?;
        let (ok, step) = step_small((&next - &p).as_ref(), p.as_ref(), opts.tol)?;
        last = step;
        p = next;
        if !step.is_finite() {
            return Err(Error::NonFinite("riccati iterate".into()));
        }
        if ok {
            return finish(p, a, b, w, it);
        }
    }
    Err(not_converged(p, a, b, w, opts.max_iter, last))
}

fn doubling(a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights, opts: &DareOptions) -> Result<RiccatiSolution> {
    let m = a.nrows();
    let (rinv_bt, _) = solve_psd(w.r.as_ref(), b.transpose())?;
    let mut ak = a.to_owned();
    let mut gk = symmetrize((b * &rinv_bt).as_ref());
    // H_k equals the value-iteration iterate P_{2^k - 1}.
    let mut hk = w.q.clone();
    let mut index: usize = 0;
    loop {
        let next = riccati_step(hk.as_ref(), a, b, w)?;
        let (ok, step) = step_small((&next - &hk).as_ref(), hk.as_ref(), opts.tol)?;
        if !step.is_finite() {
            return Err(Error::NonFinite("riccati iterate".into()));
        }
        let last = step;
        let reached = index + 1;
        if ok {
            return finish(next, a, b, w, reached);
        }
        if 2 * reached > opts.max_iter {
            return Err(not_converged(next, a, b, w, reached, last));
        }
        let mut wm = &gk * &hk;
        numerics::add_diagonal(&mut wm, 1.0);
        let lu = wm.partial_piv_lu();
        let y = lu.solve(&ak);
        let wg = lu.solve(&gk);
        let a_next = &ak * &y;
        let g_next = &gk + &ak * &wg * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &y;
        ak = a_next;
        gk = symmetrize(g_next.as_ref());
        hk = symmetrize(h_next.as_ref());
        index = 2 * index + 1;
        if m > 0 && !hk.norm_max().is_finite() {
            return Err(Error::NonFinite("riccati doubling iterate".into()));
        }
    }
}

/// Solves the model's DARE on the range of `(K_out^†)^{1/2}`.
///
/// `A`, `B` and `Q = CᵀQ'C` vanish on the complement, so the reduced solution
/// lifts back to the full one exactly.
pub fn solve_model_dare(model: &KoopmanModel, w: &LqrWeights, opts: &DareOptions) -> Result<RiccatiSolution> {
    let m = model.m();
    let basis = (model.out_basis.ncols() < m).then_some(&model.out_basis);
    let Some(v) = basis else {
        return solve_dare(model.a.as_ref(), model.b.as_ref(), w, opts);
    };
    let ar = v.transpose() * &model.a * v;
    let br = v.transpose() * &model.b;
    let wr = LqrWeights {
        q: symmetrize((v.transpose() * &w.q * v).as_ref()),
        r: w.r.clone(),
    };
    let lift = |sol: RiccatiSolution| -> Result<RiccatiSolution> {
        let p = symmetrize((v * &sol.p * v.transpose()).as_ref());
        let k = &sol.k * v.transpose();
        let l = &model.a + &model.b * &k;
        let residual = dare_residual(p.as_ref(), model.a.as_ref(), model.b.as_ref(), w)?;
        Ok(RiccatiSolution {
            p,
            k,
            l,
            residual,
            rho_l: sol.rho_l,
            iterations: sol.iterations,
        })
    };
    match solve_dare(ar.as_ref(), br.as_ref(), &wr, opts) {
        Ok(sol) => lift(sol),
        Err(Error::NotConverged {
            iterations,
            last_step,
            last,
        }) => Err(Error::NotConverged {
            iterations,
            last_step,
            last: Box::new(lift(*last)?),
        }),
        Err(e) => Err(e),
    }
}

/// Like [`solve_model_dare`], but falls back to the last iterate when the
/// iteration budget runs out. The flag reports convergence.
pub fn solve_model_dare_or_last(model: &KoopmanModel, w: &LqrWeights, opts: &DareOptions) -> Result<(RiccatiSolution, bool)> {
    match solve_model_dare(model, w, opts) {
        Ok(sol) => Ok((sol, true)),
        Err(Error::NotConverged { last, .. }) => Ok((*last, false)),
        Err(e) => Err(e),
    }
}

/// `u = K · embed_state(x)`.
pub fn control_policy(model: &KoopmanModel, sol: &RiccatiSolution, x: &[f64]) -> Result<Vec<f64>> {
    let z = model.embed_state(x)?;
    if sol.k.ncols() != z.len() {
        return Err(Error::Dimension(format!("gain has {} columns, lifted state {}", sol.k.ncols(), z.len())));
    }
    Ok(matvec(sol.k.as_ref(), &z))
}

/// State-feedback law with the embedding folded into the gain.
#[derive(Debug, Clone)]
pub struct Policy {
    model_lifting: Lifting,
    /// `K (K_out^†)^{1/2}` acting on raw features.
    feature_gain: Mat<f64>,
    offset: Vec<f64>,
}

impl Policy {
    /// Regulates towards `reference` via `u = K(z(x) − z(r))`; `None` means `u = K z(x)`.
    pub fn new(model: &KoopmanModel, k: MatRef<'_, f64>, reference: Option<&[f64]>) -> Result<Self> {
        if k.ncols() != model.m() {
            return Err(Error::Dimension("gain does not match the model".into()));
        }
        let feature_gain = match model.lifting {
            Lifting::Nystrom { .. } => k * &model.gram_out_pinv_sqrt,
            Lifting::ThinPlate { .. } => k.to_owned(),
        };
        let mut policy = Self {
            model_lifting: model.lifting.clone(),
            feature_gain,
            offset: vec![0.0; k.nrows()],
        };
        if let Some(r) = reference {
            policy.offset = policy.apply(&model.raw_features(r)?);
        }
        Ok(policy)
    }

    fn apply(&self, features: &[f64]) -> Vec<f64> {
        matvec(self.feature_gain.as_ref(), features)
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let feats = match &self.model_lifting {
            Lifting::Nystrom { kernel, landmarks } => kernel.sections(x, &landmarks.outputs),
            Lifting::ThinPlate { centers } => crate::kernels::thin_plate_unchecked(x, centers),
        };
        self.apply(&feats).iter().zip(&self.offset).map(|(u, o)| u - o).collect()
    }
}

/// Finite-horizon backward recursion, used as an oracle.
pub fn value_iteration(a: MatRef<'_, f64>, b: MatRef<'_, f64>, w: &LqrWeights, horizon: usize) -> Result<Mat<f64>> {
    check_shapes(a, b, w)?;
    let mut p = w.q.clone();
    for _ in 0..horizon {
        p = riccati_step(p.as_ref(), a, b, w)?;
    }
    Ok(p)
}

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{fmt_f64, sample_landmarks, Dataset, LandmarkSet, SamplingStrategy};
use crate::error::{Error, Result};
use crate::identify::{control_matrix, dedupe_points, fit, KoopmanModel, Lifting};
use crate::kernels::{gram, KernelSpec};
use crate::lqr::{solve_model_dare_or_last, DareOptions, LqrWeights, RiccatiSolution};
use crate::numerics::{
    self, add_diagonal, block_diag, default_tau_kmax, default_zeta, hcat, matvec, operator_norm,
    operator_norm_sym, psd_pinv, psd_sqrt, solve_psd, spectral_radius, symmetrize, tau, trace,
    RankTolerance,
};

/// Finite-rank operator `(g, u) ↦ Σ_i ψ(a_i) [coeff · (g(b_1), …, g(b_p), u)]_i`.
#[derive(Debug, Clone)]
pub struct RkhsOperator {
    pub kernel: KernelSpec,
    pub out_anchors: Vec<Vec<f64>>,
    pub in_state_anchors: Vec<Vec<f64>>,
    pub n_u: usize,
    pub coeff: Mat<f64>,
}

impl RkhsOperator {
    pub fn new(
        kernel: KernelSpec,
        out_anchors: Vec<Vec<f64>>,
        in_state_anchors: Vec<Vec<f64>>,
        n_u: usize,
        coeff: Mat<f64>,
    ) -> Result<Self> {
        if out_anchors.is_empty() {
            return Err(Error::Empty("output anchors".into()));
        }
        if in_state_anchors.is_empty() && n_u == 0 {
            return Err(Error::Empty("input anchors".into()));
        }
        if coeff.nrows() != out_anchors.len() || coeff.ncols() != in_state_anchors.len() + n_u {
            return Err(Error::Dimension(format!(
                "coefficient is {}x{}, anchors need {}x{}",
                coeff.nrows(),
                coeff.ncols(),
                out_anchors.len(),
                in_state_anchors.len() + n_u
            )));
        }
        numerics::check_finite(coeff.as_ref(), "operator coefficient")?;
        Ok(Self {
            kernel,
            out_anchors,
            in_state_anchors,
            n_u,
            coeff,
        })
    }

    pub fn has_control_block(&self) -> bool {
        self.n_u > 0
    }

    /// Applies the operator to `(k(w,·), u)` and evaluates the result at `x`.
    pub fn apply_feature_at(&self, w: &[f64], u: &[f64], x: &[f64]) -> f64 {
        let mut input = self.kernel.sections(w, &self.in_state_anchors);
        input.extend_from_slice(u);
        let c = matvec(self.coeff.as_ref(), &input);
        c.iter()
            .zip(&self.out_anchors)
            .map(|(ci, a)| ci * self.kernel.k(a, x))
            .sum()
    }

    /// `self − other` on the union of the anchor sets; shared anchors are merged so common terms cancel exactly.
    pub fn sub(&self, other: &RkhsOperator) -> Result<RkhsOperator> {
        if self.kernel != other.kernel {
            return Err(Error::InvalidArgument("operators use different kernels".into()));
        }
        if self.n_u != other.n_u {
            return Err(Error::Dimension("operators have different control dimensions".into()));
        }
        let (out, out_idx) = merge_anchors(&self.out_anchors, &other.out_anchors);
        let (inp, in_idx) = merge_anchors(&self.in_state_anchors, &other.in_state_anchors);
        let (p, nu) = (inp.len(), self.n_u);
        let mut coeff = Mat::<f64>::zeros(out.len(), p + nu);
        for (op, sign, (oi, ii)) in [(self, 1.0, (&out_idx.0, &in_idx.0)), (other, -1.0, (&out_idx.1, &in_idx.1))] {
            let pa = op.in_state_anchors.len();
            for (r, &row) in oi.iter().enumerate() {
                for (c, &col) in ii.iter().enumerate() {
                    coeff[(row, col)] += sign * op.coeff[(r, c)];
                }
                for c in 0..nu {
                    coeff[(row, p + c)] += sign * op.coeff[(r, pa + c)];
                }
            }
        }
        RkhsOperator::new(self.kernel, out, inp, nu, coeff)
    }

    /// `Gf^{1/2} Θ Gf^{1/2}` where `DD* = F Θ F*` over the output anchors.
    fn whitened_gram(&self) -> Result<Mat<f64>> {
        let gf = gram(&self.kernel, &self.out_anchors, &self.out_anchors)?;
        let half = psd_sqrt(gf.as_ref(), RankTolerance::default())?;
        let theta = self.theta()?;
        Ok(symmetrize((&half * &theta * &half).as_ref()))
    }

    fn theta(&self) -> Result<Mat<f64>> {
        let k_in = if self.in_state_anchors.is_empty() {
            Mat::zeros(0, 0)
        } else {
            gram(&self.kernel, &self.in_state_anchors, &self.in_state_anchors)?
        };
        let inner = block_diag(k_in.as_ref(), Mat::<f64>::identity(self.n_u, self.n_u).as_ref());
        Ok(symmetrize((&self.coeff * &inner * self.coeff.transpose()).as_ref()))
    }

    pub fn operator_norm(&self) -> Result<f64> {
        let m = self.whitened_gram()?;
        Ok(operator_norm_sym(m.as_ref())?.sqrt())
    }

    pub fn hs_norm(&self) -> Result<f64> {
        let gf = gram(&self.kernel, &self.out_anchors, &self.out_anchors)?;
        let theta = self.theta()?;
        Ok(trace((&theta * &gf).as_ref()).max(0.0).sqrt())
    }
}

type AnchorIndex = (Vec<usize>, Vec<usize>);

/// Union of two point lists (bitwise equality) with the position of every input point in the union.
fn merge_anchors(a: &[Vec<f64>], b: &[Vec<f64>]) -> (Vec<Vec<f64>>, AnchorIndex) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut union = Vec::new();
    let mut place = |p: &Vec<f64>| {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        *seen.entry(key).or_insert_with(|| {
            union.push(p.clone());
            union.len() - 1
        })
    };
    let ia: Vec<usize> = a.iter().map(&mut place).collect();
    let ib: Vec<usize> = b.iter().map(&mut place).collect();
    (union, (ia, ib))
}

fn check_same_kernel(op: &RkhsOperator, kernel: &KernelSpec) -> Result<()> {
    if op.kernel != *kernel {
        return Err(Error::InvalidArgument("operator kernel does not match".into()));
    }
    Ok(())
}

/// Ridge estimator `G = Z*(SS* + γI)^{-1}S` over the training pairs.
pub fn build_exact_operator(ds: &Dataset, kernel: &KernelSpec, gamma: f64) -> Result<RkhsOperator> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let n = ds.n();
    let u = control_matrix(ds);
    let mut s = gram(kernel, &ds.xs, &ds.xs)? + &u * u.transpose();
    s = numerics::scaled(s.as_ref(), 1.0 / n as f64);
    add_diagonal(&mut s, gamma);
    let rhs = hcat(Mat::<f64>::identity(n, n).as_ref(), u.as_ref());
    let (x, _) = solve_psd(s.as_ref(), rhs.as_ref())?;
    let coeff = numerics::scaled(x.as_ref(), 1.0 / n as f64);
    RkhsOperator::new(*kernel, ds.ys.clone(), ds.xs.clone(), ds.n_u, coeff)
}

/// `G̃ = Π_out Z*(SΠ_in S* + γI)^{-1} S Π_in`.
pub fn build_nystrom_operator(
    ds: &Dataset,
    kernel: &KernelSpec,
    gamma: f64,
    landmarks: &LandmarkSet,
    tol: RankTolerance,
) -> Result<RkhsOperator> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let n = ds.n();
    let (inputs, _) = dedupe_points(&landmarks.inputs);
    let (outputs, _) = dedupe_points(&landmarks.outputs);
    if inputs.is_empty() || outputs.is_empty() {
        return Err(Error::Empty("landmark set".into()));
    }
    let u = control_matrix(ds);
    let k_in_pinv = psd_pinv(gram(kernel, &inputs, &inputs)?.as_ref(), tol)?;
    let k_nm = gram(kernel, &ds.xs, &inputs)?;
    let proj = &k_nm * &k_in_pinv;
    let mut s = &proj * k_nm.transpose() + &u * u.transpose();
    s = numerics::scaled(s.as_ref(), 1.0 / n as f64);
    add_diagonal(&mut s, gamma);
    let rhs = hcat(proj.as_ref(), u.as_ref());
    let (x, _) = solve_psd(s.as_ref(), rhs.as_ref())?;
    let k_out_pinv = psd_pinv(gram(kernel, &outputs, &outputs)?.as_ref(), tol)?;
    let k_out_n = gram(kernel, &outputs, &ds.ys)?;
    let coeff = numerics::scaled((&k_out_pinv * &k_out_n * &x).as_ref(), 1.0 / n as f64);
    RkhsOperator::new(*kernel, outputs, inputs, ds.n_u, coeff)
}

/// Exact operator norm `‖A − B‖`.
pub fn operator_gap_norm(a: &RkhsOperator, b: &RkhsOperator, kernel: &KernelSpec) -> Result<f64> {
    check_same_kernel(a, kernel)?;
    check_same_kernel(b, kernel)?;
    a.sub(b)?.operator_norm()
}

pub fn hs_gap_norm(a: &RkhsOperator, b: &RkhsOperator, kernel: &KernelSpec) -> Result<f64> {
    check_same_kernel(a, kernel)?;
    check_same_kernel(b, kernel)?;
    a.sub(b)?.hs_norm()
}

fn log_term(m: f64, delta: f64) -> f64 {
    (8.0 * m / (5.0 * delta)).ln()
}

/// Two-term high-probability bound on `‖G̃ − G‖`.
pub fn theorem1_bound(kappa: f64, gamma: f64, m: usize, delta: f64) -> Result<f64> {
    if !(kappa > 0.0 && gamma > 0.0 && m > 0 && delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(
            "bound needs kappa, gamma, m > 0 and 0 < delta < 1".into(),
        ));
    }
    let mf = m as f64;
    let lg = log_term(mf, delta);
    let first = (kappa / gamma + 1.0 / gamma.sqrt()) * 4.0 * kappa * (3.0 / mf * lg).sqrt();
    let second = 48.0 * kappa.powi(3) / gamma.powf(1.5) * lg / mf;
    Ok(first + second)
}

/// `4κ√((3/m) log(8m/5δ))`.
pub fn projection_bound(kappa: f64, m: usize, delta: f64) -> f64 {
    let mf = m as f64;
    4.0 * kappa * (3.0 / mf * log_term(mf, delta)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Input,
    Output,
}

/// `√λ_max((1/n)(K_nn − K_nm K_m^† K_mn))` on the chosen side.
pub fn projection_error(
    ds: &Dataset,
    side: Side,
    kernel: &KernelSpec,
    landmarks: &[Vec<f64>],
    tol: RankTolerance,
) -> Result<f64> {
    let pts = match side {
        Side::Input => &ds.xs,
        Side::Output => &ds.ys,
    };
    let (lm, _) = dedupe_points(landmarks);
    let k_nn = gram(kernel, pts, pts)?;
    let k_nm = gram(kernel, pts, &lm)?;
    let k_m_pinv = psd_pinv(gram(kernel, &lm, &lm)?.as_ref(), tol)?;
    let resid = k_nn - &k_nm * &k_m_pinv * k_nm.transpose();
    let scaled = numerics::scaled(resid.as_ref(), 1.0 / pts.len() as f64);
    let eig = numerics::sym_eigen(scaled.as_ref())?;
    Ok(eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

fn nystrom_parts(model: &KoopmanModel) -> Result<(&KernelSpec, &[Vec<f64>])> {
    match &model.lifting {
        Lifting::Nystrom { kernel, landmarks } => Ok((kernel, &landmarks.outputs)),
        Lifting::ThinPlate { .. } => Err(Error::InvalidArgument("theory quantities need a kernel lifting".into())),
    }
}

/// Map from exact lifted coordinates to Nyström ones: `K̃_out^{†1/2} K(l, y) K_out^{†1/2}`.
pub fn coordinate_map(exact: &KoopmanModel, nystrom: &KoopmanModel) -> Result<Mat<f64>> {
    let (ke, ye) = nystrom_parts(exact)?;
    let (kn, yn) = nystrom_parts(nystrom)?;
    if ke != kn {
        return Err(Error::InvalidArgument("models use different kernels".into()));
    }
    Ok(&nystrom.gram_out_pinv_sqrt * gram(ke, yn, ye)? * &exact.gram_out_pinv_sqrt)
}

/// Nyström gain acting on exact lifted coordinates.
pub fn gain_in_exact_coords(exact: &KoopmanModel, nystrom: &KoopmanModel, k_tilde: MatRef<'_, f64>) -> Result<Mat<f64>> {
    Ok(k_tilde * coordinate_map(exact, nystrom)?)
}

/// Common state cost `Q = C*Q'C` of the exact problem, compressed to the Nyström coordinates.
pub fn shared_weights(
    exact: &KoopmanModel,
    nystrom: &KoopmanModel,
    qprime: MatRef<'_, f64>,
    r: MatRef<'_, f64>,
) -> Result<(LqrWeights, LqrWeights)> {
    let q = symmetrize((exact.c.transpose() * qprime * &exact.c).as_ref());
    let t = coordinate_map(exact, nystrom)?;
    let qn = symmetrize((&t * &q * t.transpose()).as_ref());
    Ok((LqrWeights::new(q, r.to_owned())?, LqrWeights::new(qn, r.to_owned())?))
}

fn max1(v: f64) -> f64 {
    v.max(1.0)
}

/// Norms of the exact closed loop on the range of the lifted coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct ExactSummary {
    pub norm_a: f64,
    pub norm_b: f64,
    pub norm_p: f64,
    pub norm_k: f64,
    pub norm_l: f64,
    pub norm_r_inv: f64,
    pub sigma_max_r: f64,
    pub sigma_min_r: f64,
    pub rho_l: f64,
    pub zeta: f64,
    pub tau: f64,
    pub tau_truncated: bool,
    /// `1 + max{‖A‖, ‖B‖, ‖P‖, ‖K‖}`.
    pub big_gamma: f64,
}

pub fn exact_summary(model: &KoopmanModel, sol: &RiccatiSolution, w: &LqrWeights) -> Result<ExactSummary> {
    let v = &model.out_basis;
    let a = v.transpose() * &model.a * v;
    let b = v.transpose() * &model.b;
    let p = v.transpose() * &sol.p * v;
    let k = &sol.k * v;
    let l = &a + &b * &k;
    let rho = spectral_radius(l.as_ref())?;
    if !(rho < 1.0) {
        return Err(Error::Precondition(format!("exact closed loop has spectral radius {rho}")));
    }
    let zeta = default_zeta(rho);
    let t = tau(l.as_ref(), zeta, default_tau_kmax(zeta))?;
    let r_eig = numerics::sym_eigen(w.r.as_ref())?;
    let sigma_min_r = r_eig.values.first().copied().unwrap_or(0.0);
    let sigma_max_r = r_eig.values.last().copied().unwrap_or(0.0);
    let (norm_a, norm_b, norm_p, norm_k) = (
        operator_norm(a.as_ref())?,
        operator_norm(b.as_ref())?,
        operator_norm_sym(p.as_ref())?,
        operator_norm(k.as_ref())?,
    );
    Ok(ExactSummary {
        norm_a,
        norm_b,
        norm_p,
        norm_k,
        norm_l: operator_norm(l.as_ref())?,
        norm_r_inv: 1.0 / sigma_min_r,
        sigma_max_r,
        sigma_min_r,
        rho_l: rho,
        zeta,
        tau: t.value,
        tau_truncated: t.truncated,
        big_gamma: 1.0 + norm_a.max(norm_b).max(norm_p).max(norm_k),
    })
}

/// `6ε τ²/(1 − ζ²) ‖A‖₊² ‖P‖₊² ‖B‖₊ ‖R⁻¹‖₊` with `‖·‖₊ = max(‖·‖, 1)`.
pub fn lemma6_rhs(eps: f64, s: &ExactSummary) -> f64 {
    6.0 * eps * s.tau.powi(2) / (1.0 - s.zeta.powi(2))
        * max1(s.norm_a).powi(2)
        * max1(s.norm_p).powi(2)
        * max1(s.norm_b)
        * max1(s.norm_r_inv)
}

/// Largest `ε` for which the Riccati perturbation bound applies.
pub fn lemma6_eps_limit(s: &ExactSummary) -> f64 {
    let second = 1.0 / 12.0 / (max1(s.norm_l).powi(2) + max1(s.norm_p)) * (1.0 - s.zeta.powi(2)).powi(2)
        / s.tau.powi(4)
        / max1(s.norm_a).powi(2)
        / max1(s.norm_p).powi(2)
        / max1(s.norm_b).powi(3)
        / max1(s.norm_r_inv).powi(2);
    s.norm_b.min(second)
}

/// `36 σ_max(R) Γ⁹ g² κ² τ²/(1 − ζ²)`.
pub fn theorem7_rhs(g: f64, kappa: f64, s: &ExactSummary) -> f64 {
    36.0 * s.sigma_max_r * s.big_gamma.powi(9) * g * g * kappa * kappa * s.tau.powi(2) / (1.0 - s.zeta.powi(2))
}

pub fn theorem7_applies(eps: f64, g: f64, s: &ExactSummary) -> bool {
    eps < lemma6_eps_limit(s)
        && g <= (1.0 - s.zeta) / (6.0 * s.norm_b * s.tau * s.big_gamma.powi(2))
        && s.sigma_min_r >= 1.0
}

/// `‖P − P̃‖` as self-adjoint operators on the output space.
pub fn riccati_operator_gap(
    exact: &KoopmanModel,
    p: MatRef<'_, f64>,
    nystrom: &KoopmanModel,
    p_tilde: MatRef<'_, f64>,
) -> Result<f64> {
    let (ke, ye) = nystrom_parts(exact)?;
    let (kn, yn) = nystrom_parts(nystrom)?;
    if ke != kn {
        return Err(Error::InvalidArgument("models use different kernels".into()));
    }
    let te = &exact.gram_out_pinv_sqrt * p * &exact.gram_out_pinv_sqrt;
    let tn = numerics::scaled((&nystrom.gram_out_pinv_sqrt * p_tilde * &nystrom.gram_out_pinv_sqrt).as_ref(), -1.0);
    let theta = block_diag(te.as_ref(), tn.as_ref());
    let mut anchors = ye.to_vec();
    anchors.extend(yn.iter().cloned());
    let gf = gram(ke, &anchors, &anchors)?;
    let half = psd_sqrt(gf.as_ref(), RankTolerance::default())?;
    operator_norm_sym(symmetrize((&half * &theta * &half).as_ref()).as_ref())
}

#[derive(Debug, Clone, Serialize)]
pub struct RiccatiGapReport {
    pub gap: f64,
    pub epsilon: f64,
    pub lemma6_rhs: f64,
    pub lemma6_applies: bool,
    pub exact_converged: bool,
    pub nystrom_converged: bool,
}

/// Solves both problems under the shared cost and compares the Riccati operators.
pub fn riccati_gap(
    exact: &KoopmanModel,
    exact_sol: &RiccatiSolution,
    exact_converged: bool,
    summary: &ExactSummary,
    nystrom: &KoopmanModel,
    qprime: MatRef<'_, f64>,
    r: MatRef<'_, f64>,
    epsilon: f64,
    opts: &DareOptions,
) -> Result<(RiccatiGapReport, RiccatiSolution)> {
    let (_, wn) = shared_weights(exact, nystrom, qprime, r)?;
    let (sol, nystrom_converged) = solve_model_dare_or_last(nystrom, &wn, opts)?;
    let gap = riccati_operator_gap(exact, exact_sol.p.as_ref(), nystrom, sol.p.as_ref())?;
    Ok((
        RiccatiGapReport {
            gap,
            epsilon,
            lemma6_rhs: lemma6_rhs(epsilon, summary),
            lemma6_applies: epsilon < lemma6_eps_limit(summary),
            exact_converged,
            nystrom_converged,
        },
        sol,
    ))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ObjectiveGap {
    pub j: f64,
    pub j_hat: f64,
    /// `Ĵ − J`, `+∞` when the Nyström gain destabilizes the exact surrogate.
    pub gap: f64,
    pub stabilizing: bool,
    /// Number of closed-loop steps summed (a power of two).
    pub horizon: u64,
}

/// `Σ_{i<T} ⟨z_i, (Q + KᵀRK) z_i⟩` along `z_{i+1} = (A + BK) z_i`, with `T` doubled until the tail is negligible.
fn truncated_cost(a: MatRef<'_, f64>, b: MatRef<'_, f64>, k: MatRef<'_, f64>, w: &LqrWeights, z0: &[f64]) -> Result<(f64, u64)> {
    let mut l = a + b * k;
    let mut p = symmetrize((&w.q + k.transpose() * &w.r * k).as_ref());
    let quad = |p: &Mat<f64>| -> f64 { z0.iter().zip(matvec(p.as_ref(), z0)).map(|(x, y)| x * y).sum() };
    let mut value = quad(&p);
    let mut horizon: u64 = 1;
    for _ in 0..62 {
        p = symmetrize((&p + l.transpose() * &p * &l).as_ref());
        l = &l * &l;
        horizon *= 2;
        let next = quad(&p);
        if !next.is_finite() {
            return Err(Error::NonFinite("closed-loop cost".into()));
        }
        let done = (next - value).abs() <= 1e-16 * next.abs().max(1e-300);
        value = next;
        if done {
            break;
        }
    }
    Ok((value, horizon))
}

/// Costs of the exact surrogate under its own gain and under the Nyström gain from the same `z₀`.
pub fn objective_gap(
    exact: &KoopmanModel,
    w: &LqrWeights,
    k_exact: MatRef<'_, f64>,
    k_nystrom: MatRef<'_, f64>,
    z0: &[f64],
) -> Result<ObjectiveGap> {
    let v = &exact.out_basis;
    let a = v.transpose() * &exact.a * v;
    let b = v.transpose() * &exact.b;
    let wr = LqrWeights {
        q: symmetrize((v.transpose() * &w.q * v).as_ref()),
        r: w.r.clone(),
    };
    let z = matvec(v.transpose(), z0);
    let ke = k_exact * v;
    let kn = k_nystrom * v;
    if !(spectral_radius((&a + &b * &ke).as_ref())? < 1.0) {
        return Err(Error::Precondition("exact gain does not stabilize the exact surrogate".into()));
    }
    let (j, horizon) = truncated_cost(a.as_ref(), b.as_ref(), ke.as_ref(), &wr, &z)?;
    if !(spectral_radius((&a + &b * &kn).as_ref())? < 1.0) {
        return Ok(ObjectiveGap {
            j,
            j_hat: f64::INFINITY,
            gap: f64::INFINITY,
            stabilizing: false,
            horizon,
        });
    }
    let (j_hat, h2) = truncated_cost(a.as_ref(), b.as_ref(), kn.as_ref(), &wr, &z)?;
    Ok(ObjectiveGap {
        j,
        j_hat,
        gap: j_hat - j,
        stabilizing: true,
        horizon: horizon.max(h2),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub m: usize,
    pub seed: u64,
    pub gamma: f64,
    pub delta: f64,
    pub kappa: f64,
    pub empirical_gap: f64,
    pub hs_gap: f64,
    pub theorem1_rhs: f64,
    pub norm_g: f64,
    pub projection_in: f64,
    pub projection_out: f64,
    pub projection_rhs: f64,
    pub riccati_gap: f64,
    pub lemma6_rhs: f64,
    pub lemma6_applies: bool,
    pub objective_gap: f64,
    pub j: f64,
    pub j_hat: f64,
    pub theorem7_rhs: f64,
    pub theorem7_applies: bool,
    pub big_gamma: f64,
    pub tau: f64,
    pub zeta: f64,
    pub exact_converged: bool,
    pub nystrom_converged: bool,
}

pub const BOUND_COLUMNS: [&str; 25] = [
    "m",
    "seed",
    "gamma",
    "delta",
    "kappa",
    "gap",
    "hs_gap",
    "theorem1_rhs",
    "norm_g",
    "projection_in",
    "projection_out",
    "projection_rhs",
    "riccati_gap",
    "lemma6_rhs",
    "lemma6_applies",
    "objective_gap",
    "j",
    "j_hat",
    "theorem7_rhs",
    "theorem7_applies",
    "big_gamma",
    "tau",
    "zeta",
    "exact_converged",
    "nystrom_converged",
];

impl BoundReport {
    fn row(&self) -> Vec<String> {
        let f = |v: f64| fmt_f64(v);
        vec![
            self.m.to_string(),
            self.seed.to_string(),
            f(self.gamma),
            f(self.delta),
            f(self.kappa),
            f(self.empirical_gap),
            f(self.hs_gap),
            f(self.theorem1_rhs),
            f(self.norm_g),
            f(self.projection_in),
            f(self.projection_out),
            f(self.projection_rhs),
            f(self.riccati_gap),
            f(self.lemma6_rhs),
            self.lemma6_applies.to_string(),
            f(self.objective_gap),
            f(self.j),
            f(self.j_hat),
            f(self.theorem7_rhs),
            self.theorem7_applies.to_string(),
            f(self.big_gamma),
            f(self.tau),
            f(self.zeta),
            self.exact_converged.to_string(),
            self.nystrom_converged.to_string(),
        ]
    }
}

pub fn write_bound_reports_to<W: Write>(w: W, rows: &[BoundReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BOUND_COLUMNS)?;
    for r in rows {
        out.write_record(r.row())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_bound_reports(path: &Path, rows: &[BoundReport]) -> Result<()> {
    write_bound_reports_to(std::fs::File::create(path)?, rows)
}

#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub lambda: f64,
    pub delta: f64,
    pub ms: Vec<usize>,
    pub seeds: Vec<u64>,
    pub strategy: SamplingStrategy,
    pub qprime: Mat<f64>,
    pub r: Mat<f64>,
    pub x0: Vec<f64>,
    pub tol: RankTolerance,
    pub dare: DareOptions,
}

/// Exact-kernel quantities shared by every row of a sweep.
pub struct ExactContext {
    pub operator: RkhsOperator,
    pub norm_g: f64,
    pub model: KoopmanModel,
    pub weights: LqrWeights,
    pub sol: RiccatiSolution,
    pub converged: bool,
    pub summary: ExactSummary,
    pub z0: Vec<f64>,
}

pub fn exact_context(ds: &Dataset, opts: &StudyOptions) -> Result<ExactContext> {
    let operator = build_exact_operator(ds, &opts.kernel, opts.gamma)?;
    let norm_g = operator.operator_norm()?;
    let lifting = Lifting::Nystrom {
        kernel: opts.kernel,
        landmarks: LandmarkSet::full(ds),
    };
    let model = fit(ds, &lifting, opts.gamma, opts.lambda, opts.tol)?;
    let q = symmetrize((model.c.transpose() * &opts.qprime * &model.c).as_ref());
    let weights = LqrWeights::new(q, opts.r.clone())?;
    let (sol, converged) = solve_model_dare_or_last(&model, &weights, &opts.dare)?;
    let summary = exact_summary(&model, &sol, &weights)?;
    let z0 = model.embed_state(&opts.x0)?;
    Ok(ExactContext {
        operator,
        norm_g,
        model,
        weights,
        sol,
        converged,
        summary,
        z0,
    })
}

pub fn bound_row(ds: &Dataset, ctx: &ExactContext, opts: &StudyOptions, m: usize, seed: u64) -> Result<BoundReport> {
    let kappa = opts.kernel.kappa();
    let landmarks = sample_landmarks(ds, m, opts.strategy, seed)?;
    let g_tilde = build_nystrom_operator(ds, &opts.kernel, opts.gamma, &landmarks, opts.tol)?;
    let diff = ctx.operator.sub(&g_tilde)?;
    let eps = diff.operator_norm()?;
    let hs = diff.hs_norm()?;
    let lifting = Lifting::Nystrom {
        kernel: opts.kernel,
        landmarks: landmarks.clone(),
    };
    let nystrom = fit(ds, &lifting, opts.gamma, opts.lambda, opts.tol)?;
    let (rg, sol_n) = riccati_gap(
        &ctx.model,
        &ctx.sol,
        ctx.converged,
        &ctx.summary,
        &nystrom,
        opts.qprime.as_ref(),
        opts.r.as_ref(),
        eps,
        &opts.dare,
    )?;
    let k_n = gain_in_exact_coords(&ctx.model, &nystrom, sol_n.k.as_ref())?;
    let og = objective_gap(&ctx.model, &ctx.weights, ctx.sol.k.as_ref(), k_n.as_ref(), &ctx.z0)?;
    let t7 = theorem7_rhs(rg.lemma6_rhs, kappa, &ctx.summary);
    Ok(BoundReport {
        m,
        seed,
        gamma: opts.gamma,
        delta: opts.delta,
        kappa,
        empirical_gap: eps,
        hs_gap: hs,
        theorem1_rhs: theorem1_bound(kappa, opts.gamma, m, opts.delta)?,
        norm_g: ctx.norm_g,
        projection_in: projection_error(ds, Side::Input, &opts.kernel, &landmarks.inputs, opts.tol)?,
        projection_out: projection_error(ds, Side::Output, &opts.kernel, &landmarks.outputs, opts.tol)?,
        projection_rhs: projection_bound(kappa, m, opts.delta),
        riccati_gap: rg.gap,
        lemma6_rhs: rg.lemma6_rhs,
        lemma6_applies: rg.lemma6_applies,
        objective_gap: og.gap,
        j: og.j,
        j_hat: og.j_hat,
        theorem7_rhs: t7,
        theorem7_applies: theorem7_applies(eps, rg.lemma6_rhs, &ctx.summary),
        big_gamma: ctx.summary.big_gamma,
        tau: ctx.summary.tau,
        zeta: ctx.summary.zeta,
        exact_converged: rg.exact_converged,
        nystrom_converged: rg.nystrom_converged,
    })
}

/// Sweeps `m × seeds`; rows are ordered by `m`, then by seed.
pub fn study_bounds(ds: &Dataset, opts: &StudyOptions) -> Result<Vec<BoundReport>> {
    if opts.ms.is_empty() || opts.seeds.is_empty() {
        return Err(Error::Empty("landmark counts or seeds".into()));
    }
    let ctx = exact_context(ds, opts)?;
    let mut ms = opts.ms.clone();
    ms.sort_unstable();
    ms.dedup();
    let jobs: Vec<(usize, u64)> = ms
        .iter()
        .flat_map(|&m| opts.seeds.iter().map(move |&s| (m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(m, s)| bound_row(ds, &ctx, opts, m, s))
        .collect()
}

/// Median of finite and infinite values alike (NaNs rejected).
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median input".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("median input".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("log-log slope needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    fn tiny() -> Dataset {
        Dataset::new(vec![vec![0.3]], vec![vec![0.0]], vec![vec![0.1]]).unwrap()
    }

    #[test]
    fn exact_operator_single_point() {
        let k = KernelSpec::matern52(1.0, 1.0).unwrap();
        let g = build_exact_operator(&tiny(), &k, 0.5).unwrap();
        assert!((g.coeff[(0, 0)] - 1.0 / 1.5).abs() < 1e-15);
        assert_eq!(g.coeff[(0, 1)], 0.0);
        let big = build_exact_operator(&tiny(), &k, 1e12).unwrap();
        assert!(big.operator_norm().unwrap() < 1e-11);
    }

    #[test]
    fn theorem1_reference_value() {
        let lg = 3200f64.ln();
        let expected = 8.0 * (0.03 * lg).sqrt() + 0.48 * lg;
        let v = theorem1_bound(1.0, 1.0, 100, 0.05).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 7.81).abs() < 0.01);
        assert!(theorem1_bound(1.0, 1.0, 100, 1.0).is_err());
    }

    #[test]
    fn rank_one_norm() {
        let k = KernelSpec::new(KernelFamily::Rbf, 1.0, 1.0).unwrap();
        let op = RkhsOperator::new(k, vec![vec![0.0]], vec![vec![2.0]], 0, Mat::from_fn(1, 1, |_, _| 1.0)).unwrap();
        assert!((op.operator_norm().unwrap() - 1.0).abs() < 1e-12);
        assert!((op.hs_norm().unwrap() - 1.0).abs() < 1e-12);
        let zero = op.sub(&op).unwrap();
        assert!(zero.operator_norm().unwrap() < 1e-12);
    }

    #[test]
    fn slope_and_median() {
        let xs = [10.0, 20.0, 40.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
    }
}

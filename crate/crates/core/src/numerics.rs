//! Dense linear-algebra helpers shared by the fitting, control and theory code.

use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used by every pseudo-inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTolerance(f64);

impl RankTolerance {
    pub fn new(rel_cutoff: f64) -> Result<Self> {
        if !(rel_cutoff > 0.0 && rel_cutoff < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_cutoff must lie in (0, 1), got {rel_cutoff}"
            )));
        }
        Ok(Self(rel_cutoff))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self(1e-10)
    }
}

pub fn check_finite(m: MatRef<'_, f64>, what: &str) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFinite(what.to_string()));
            }
        }
    }
    Ok(())
}

fn check_square(m: MatRef<'_, f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Builds a matrix whose rows are the given points.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

pub fn mat_to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn symmetrize(m: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

pub fn matvec(m: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), v.len());
    let mut out = vec![0.0; m.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let col = m.col(j);
        for (i, o) in out.iter_mut().enumerate() {
            *o += col[i] * vj;
        }
    }
    out
}

pub fn scaled(m: MatRef<'_, f64>, s: f64) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| s * m[(i, j)])
}

pub fn add_diagonal(m: &mut Mat<f64>, s: f64) {
    for i in 0..m.nrows().min(m.ncols()) {
        m[(i, i)] += s;
    }
}

pub fn trace(m: MatRef<'_, f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

/// Block-diagonal matrix built from two square blocks.
pub fn block_diag(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let (p, q) = (a.nrows(), b.nrows());
    let mut out = Mat::zeros(p + q, a.ncols() + b.ncols());
    out.submatrix_mut(0, 0, p, a.ncols()).copy_from(a);
    out.submatrix_mut(p, a.ncols(), q, b.ncols()).copy_from(b);
    out
}

/// Horizontal concatenation `[a | b]`.
pub fn hcat(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.submatrix_mut(0, 0, a.nrows(), a.ncols()).copy_from(a);
    out.submatrix_mut(0, a.ncols(), b.nrows(), b.ncols()).copy_from(b);
    out
}

/// Vertical concatenation.
pub fn vcat(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.submatrix_mut(0, 0, a.nrows(), a.ncols()).copy_from(a);
    out.submatrix_mut(a.nrows(), 0, b.nrows(), b.ncols()).copy_from(b);
    out
}

#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

pub fn sym_eigen(m: MatRef<'_, f64>) -> Result<SymEigen> {
    check_square(m, "matrix")?;
    check_finite(m, "symmetric eigenproblem")?;
    let s = symmetrize(m);
    let evd = s
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let values = evd.S().column_vector().iter().copied().collect();
    Ok(SymEigen {
        values,
        vectors: evd.U().to_owned(),
    })
}

/// Eigen-subspace of a PSD matrix above the relative cutoff.
#[derive(Debug, Clone)]
pub struct PsdRange {
    /// Orthonormal columns spanning the retained eigenvectors.
    pub basis: Mat<f64>,
    pub values: Vec<f64>,
    pub dropped: usize,
    pub max_eig: f64,
}

impl PsdRange {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// `V f(Λ) Vᵀ` over the retained subspace.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.basis.nrows();
        let r = self.rank();
        let scaled_basis = Mat::from_fn(n, r, |i, j| self.basis[(i, j)] * f(self.values[j]));
        let out = &scaled_basis * self.basis.transpose();
        symmetrize(out.as_ref())
    }

    pub fn condition_number(&self) -> f64 {
        match self.values.first() {
            Some(&min) if min > 0.0 => self.max_eig / min,
            _ => f64::INFINITY,
        }
    }
}

pub fn psd_range(m: MatRef<'_, f64>, tol: RankTolerance) -> Result<PsdRange> {
    let n = m.nrows();
    let eig = sym_eigen(m)?;
    let max_eig = eig.values.last().copied().unwrap_or(0.0);
    if max_eig <= 0.0 {
        return Ok(PsdRange {
            basis: Mat::zeros(n, 0),
            values: Vec::new(),
            dropped: n,
            max_eig: max_eig.max(0.0),
        });
    }
    let cutoff = tol.value() * max_eig;
    let keep: Vec<usize> = (0..n).filter(|&i| eig.values[i] > cutoff).collect();
    let basis = Mat::from_fn(n, keep.len(), |i, j| eig.vectors[(i, keep[j])]);
    let values = keep.iter().map(|&i| eig.values[i]).collect();
    Ok(PsdRange {
        basis,
        values,
        dropped: n - keep.len(),
        max_eig,
    })
}

/// `(M^†)^{1/2}` with eigenvalues below `tol·λ_max` mapped to zero.
pub fn psd_pinv_sqrt(m: MatRef<'_, f64>, tol: RankTolerance) -> Result<Mat<f64>> {
    Ok(psd_range(m, tol)?.apply_fn(|l| 1.0 / l.sqrt()))
}

pub fn psd_pinv(m: MatRef<'_, f64>, tol: RankTolerance) -> Result<Mat<f64>> {
    Ok(psd_range(m, tol)?.apply_fn(|l| 1.0 / l))
}

pub fn psd_sqrt(m: MatRef<'_, f64>, tol: RankTolerance) -> Result<Mat<f64>> {
    Ok(psd_range(m, tol)?.apply_fn(f64::sqrt))
}

pub fn spectral_radius(l: MatRef<'_, f64>) -> Result<f64> {
    check_square(l, "matrix")?;
    check_finite(l, "spectral radius input")?;
    if l.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = l
        .to_owned()
        .eigenvalues()
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn operator_norm_sym(m: MatRef<'_, f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let eig = sym_eigen(m)?;
    Ok(eig.values.iter().map(|v| v.abs()).fold(0.0, f64::max))
}

/// Spectral norm (largest singular value).
pub fn operator_norm(m: MatRef<'_, f64>) -> Result<f64> {
    check_finite(m, "operator norm input")?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0.0);
    }
    let s = m
        .to_owned()
        .singular_values()
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    Ok(s.first().copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauReport {
    pub value: f64,
    pub zeta: f64,
    /// Power at which the supremum was attained.
    pub argmax: usize,
    /// Last power examined.
    pub last_k: usize,
    /// True when `k_max` was reached before `‖L^k‖ ≤ ζ^k`.
    pub truncated: bool,
}

pub fn default_zeta(rho: f64) -> f64 {
    0.5 * (rho + 1.0)
}

pub fn default_tau_kmax(zeta: f64) -> usize {
    10 * (1.0 / (1.0 - zeta)).ceil() as usize
}

/// `sup_k ‖L^k‖₂ ζ^{-k}` by explicit powers with early stop.
pub fn tau(l: MatRef<'_, f64>, zeta: f64, k_max: usize) -> Result<TauReport> {
    check_square(l, "L")?;
    if !(zeta < 1.0) {
        return Err(Error::Precondition(format!("zeta must be < 1, got {zeta}")));
    }
    if k_max < 1 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let rho = spectral_radius(l)?;
    if zeta < rho {
        return Err(Error::Precondition(format!(
            "zeta {zeta} is below the spectral radius {rho}"
        )));
    }
    let n = l.nrows();
    let mut power = Mat::<f64>::identity(n, n);
    let mut best = 1.0;
    let mut argmax = 0;
    let mut zk = 1.0;
    for k in 1..=k_max {
        power = l * &power;
        zk *= zeta;
        let norm = operator_norm(power.as_ref())?;
        let ratio = if zk > 0.0 {
            norm / zk
        } else if norm == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if ratio > best {
            best = ratio;
            argmax = k;
        }
        if norm <= zk {
            return Ok(TauReport {
                value: best,
                zeta,
                argmax,
                last_k: k,
                truncated: false,
            });
        }
    }
    Ok(TauReport {
        value: best,
        zeta,
        argmax,
        last_k: k_max,
        truncated: true,
    })
}

/// Solves `M X = rhs` for symmetric positive (semi)definite `M`.
///
/// Falls back to a `1e-12·trace(M)` diagonal shift when the Cholesky
/// factorization fails. The flag reports whether the shift was used.
pub fn solve_psd(m: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Result<(Mat<f64>, bool)> {
    use faer::linalg::solvers::Solve;
    check_square(m, "system matrix")?;
    if m.nrows() != rhs.nrows() {
        return Err(Error::Dimension(format!(
            "system is {}x{}, right-hand side has {} rows",
            m.nrows(),
            m.ncols(),
            rhs.nrows()
        )));
    }
    check_finite(m, "system matrix")?;
    let sym = symmetrize(m);
    if let Ok(llt) = sym.llt(Side::Lower) {
        let x = llt.solve(rhs);
        if check_finite(x.as_ref(), "solution").is_ok() {
            return Ok((x, false));
        }
    }
    let mut shifted = sym;
    let jitter = 1e-12 * trace(shifted.as_ref()).abs().max(f64::MIN_POSITIVE);
    add_diagonal(&mut shifted, jitter);
    let llt = shifted
        .llt(Side::Lower)
        .map_err(|e| Error::Singular(format!("cholesky failed after jitter: {e:?}")))?;
    let x = llt.solve(rhs);
    check_finite(x.as_ref(), "solution")?;
    Ok((x, true))
}

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern52,
    Matern32,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" | "gaussian" => Ok(Self::Rbf),
            "matern52" | "matern-5/2" => Ok(Self::Matern52),
            "matern32" | "matern-3/2" => Ok(Self::Matern32),
            other => Err(Error::InvalidArgument(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Stationary kernel `variance · φ(‖x − y‖ / lengthscale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, variance: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::InvalidArgument(format!("lengthscale must be positive, got {lengthscale}")));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {variance}")));
        }
        Ok(Self { family, lengthscale, variance })
    }

    pub fn matern52(lengthscale: f64, variance: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern52, lengthscale, variance)
    }

    /// `sup_x √k(x,x)`.
    pub fn kappa(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Profile as a function of the unscaled distance `r = ‖x − y‖`.
    #[inline]
    pub fn of_distance(&self, r: f64) -> f64 {
        let s = r / self.lengthscale;
        let p = match self.family {
            KernelFamily::Rbf => (-0.5 * s * s).exp(),
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * s;
                (1.0 + a + a * a / 3.0) * (-a).exp()
            }
            KernelFamily::Matern32 => {
                let a = 3f64.sqrt() * s;
                (1.0 + a) * (-a).exp()
            }
        };
        self.variance * p
    }

    /// Unchecked evaluation for hot loops; callers guarantee equal lengths.
    #[inline]
    pub fn k(&self, x: &[f64], y: &[f64]) -> f64 {
        self.of_distance(distance(x, y))
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Dimension(format!(
                "kernel arguments have dimensions {} and {}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel argument".into()));
        }
        Ok(self.k(x, y))
    }

    /// Kernel sections `k(x, c_j)` for every center.
    pub fn sections(&self, x: &[f64], centers: &[Vec<f64>]) -> Vec<f64> {
        centers.iter().map(|c| self.k(x, c)).collect()
    }
}

#[inline]
pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn check_points(pts: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = pts
        .first()
        .ok_or_else(|| Error::Empty(format!("{what} point list")))?
        .len();
    if d == 0 {
        return Err(Error::Dimension(format!("{what} points have dimension 0")));
    }
    for p in pts {
        if p.len() != d {
            return Err(Error::Dimension(format!("{what} points mix dimensions {d} and {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} point")));
        }
    }
    Ok(d)
}

/// Gram matrix `K_ij = k(X_i, Y_j)`; exactly symmetric when `X` and `Y` coincide.
pub fn gram(spec: &KernelSpec, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Mat<f64>> {
    let dx = check_points(xs, "row")?;
    let dy = check_points(ys, "column")?;
    if dx != dy {
        return Err(Error::Dimension(format!("gram point dimensions {dx} and {dy} differ")));
    }
    if std::ptr::eq(xs, ys) || xs == ys {
        return Ok(gram_sym(spec, xs));
    }
    Ok(Mat::from_fn(xs.len(), ys.len(), |i, j| spec.k(&xs[i], &ys[j])))
}

fn gram_sym(spec: &KernelSpec, xs: &[Vec<f64>]) -> Mat<f64> {
    let n = xs.len();
    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = spec.variance;
        for i in (j + 1)..n {
            let v = spec.k(&xs[i], &xs[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Thin-plate spline features `r² ln r`, zero at `r = 0`.
pub fn thin_plate_features(x: &[f64], centers: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_points(centers, "center")?;
    if x.len() != d {
        return Err(Error::Dimension(format!("state has dimension {}, centers {d}", x.len())));
    }
    Ok(thin_plate_unchecked(x, centers))
}

pub(crate) fn thin_plate_unchecked(x: &[f64], centers: &[Vec<f64>]) -> Vec<f64> {
    centers
        .iter()
        .map(|c| {
            let r = distance(x, c);
            if r == 0.0 {
                0.0
            } else {
                r * r * r.ln()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matern52_unit_distance() {
        let k = KernelSpec::matern52(1.0, 1.0).unwrap();
        let s5 = 5f64.sqrt();
        let expected = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        let v = k.eval(&[0.0], &[1.0]).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.523_994_108_831_820_3).abs() < 1e-15);
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 1.0);
    }

    #[test]
    fn rbf_half_value() {
        let k = KernelSpec::new(KernelFamily::Rbf, 1.0, 1.0).unwrap();
        let r = (2.0 * 2f64.ln()).sqrt();
        assert!((k.eval(&[0.0], &[r]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(KernelSpec::new(KernelFamily::Rbf, 0.0, 1.0).is_err());
        assert!(KernelSpec::new(KernelFamily::Rbf, 1.0, -1.0).is_err());
        let k = KernelSpec::matern52(1.0, 1.0).unwrap();
        assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
        assert!(k.eval(&[f64::NAN], &[0.0]).is_err());
        assert!(gram(&k, &[], &[vec![0.0]]).is_err());
    }

    #[test]
    fn thin_plate_values() {
        let c = vec![vec![0.0, 0.0]];
        assert_eq!(thin_plate_features(&[0.0, 0.0], &c).unwrap()[0], 0.0);
        assert_eq!(thin_plate_features(&[1.0, 0.0], &c).unwrap()[0], 0.0);
        let e = std::f64::consts::E;
        let v = thin_plate_features(&[e, 0.0], &c).unwrap()[0];
        assert!((v - e * e).abs() < 1e-12);
        let tiny = thin_plate_features(&[1e-8, 0.0], &c).unwrap()[0];
        assert!(tiny.abs() < 1e-14);
    }
}

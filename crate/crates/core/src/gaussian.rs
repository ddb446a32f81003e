//! Multivariate normal helpers: Cholesky sampling, log densities and the
//! closed-form Gaussian relative entropy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Fill a vector with i.i.d. standard normal draws.
pub fn standard_normal(rng: &mut dyn RngCore, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Symmetrizes `a` after checking its minimum eigenvalue is at least `-tol`.
pub fn checked_psd(a: &DMatrix<f64>, tol: f64, what: &str) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{what} is {}x{}", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { what: format!("{what} has non-finite entries") });
    }
    let s = symmetrize(a);
    if s.nrows() == 0 {
        return Ok(s);
    }
    let min = s.clone().symmetric_eigenvalues().min();
    if min < -tol {
        return Err(Error::NotPositiveDefinite {
            what: format!("{what} has eigenvalue {min:.3e}"),
        });
    }
    Ok(s)
}

pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(a))
        .ok_or_else(|| Error::NotPositiveDefinite { what: what.to_string() })
}

/// `log |A|` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Spectral condition number of a symmetric positive-definite matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(a).symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// A multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || !cov.is_square() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        let chol = cholesky(&cov, "Gaussian covariance")?;
        let log_det = log_det(&chol);
        Ok(Self { mean, cov, chol, log_det })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det
    }

    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `Σ⁻¹ v` via the Cholesky factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `Σ⁻¹ M`.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let z = standard_normal(rng, self.dim());
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    pub fn mahalanobis_sq(&self, u: &DVector<f64>) -> f64 {
        let d = u - &self.mean;
        d.dot(&self.chol.solve(&d))
    }

    pub fn log_density(&self, u: &DVector<f64>) -> f64 {
        let k = self.dim() as f64;
        -0.5 * (self.mahalanobis_sq(u) + self.log_det + k * (2.0 * std::f64::consts::PI).ln())
    }

    /// `∇ log p(u) = -Σ⁻¹ (u - μ)`.
    pub fn grad_log_density(&self, u: &DVector<f64>) -> DVector<f64> {
        -self.chol.solve(&(u - &self.mean))
    }

    /// `D[self ‖ other]` in closed form.
    pub fn kl_to(&self, other: &Gaussian) -> f64 {
        let k = self.dim() as f64;
        let trace = other.chol.solve(&self.cov).trace();
        let maha = other.mahalanobis_sq(&self.mean);
        (0.5 * (trace + maha - k + other.log_det - self.log_det)).max(0.0)
    }
}

use nalgebra::DVector;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::standard_normal;
use crate::system::Estimator;

/// `X̂(x) = N(x, σ² diag(v))`.
///
/// Noise is drawn even when `σ² = 0`, so estimators with different scales
/// consume their random streams identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimator {
    pub sigma2: f64,
    pub scaling: Vec<f64>,
    std: Vec<f64>,
}

pub fn gaussian_estimator(sigma2: f64, scaling: &[f64]) -> Result<GaussianEstimator> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma2 must be nonnegative, got {sigma2}")));
    }
    if scaling.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("scaling must be nonnegative".into()));
    }
    let std = scaling.iter().map(|v| (sigma2 * v).sqrt()).collect();
    Ok(GaussianEstimator { sigma2, scaling: scaling.to_vec(), std })
}

impl Estimator for GaussianEstimator {
    fn estimate(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let z = standard_normal(rng, x.len());
        DVector::from_fn(x.len(), |i, _| x[i] + self.std[i] * z[i])
    }

    fn describe(&self) -> String {
        format!("gaussian(sigma2={}, v={:?})", self.sigma2, self.scaling)
    }
}

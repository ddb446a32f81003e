//! The exponential mechanism
//!
//! ```text
//! U^β(x){u} = Ū{u} exp(−β H(x,u)) / Z^β(x),     Z^β(x) = Ē[exp(−β H(x,U))]
//! F^β(x)   = −β⁻¹ log Z^β(x) = E[H(x,U)] + β⁻¹ D[U^β(x) ‖ Ū]
//! ```
//!
//! Three evaluation backends are provided and the caller picks one explicitly:
//! [`FiniteGibbs`] (exact enumeration over a finite input set),
//! [`GaussianGibbs`] (Gaussian prior with a Hamiltonian quadratic in `u`, closed
//! form) and [`MonteCarloGibbs`] (self-normalized sampling from the prior).
//! All partition functions are handled in the log domain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_det, Gaussian};

/// Default number of prior samples for the Monte Carlo backend.
pub const DEFAULT_MC_SAMPLES: usize = 4096;

/// Minimum effective sample size accepted from the Monte Carlo backend.
pub const MIN_ESS: f64 = 10.0;

/// `log Σ exp(v_i)`; `-∞` when every entry is `-∞`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("beta must be positive and finite, got {beta}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub state: Vec<f64>,
    pub z: f64,
    pub log_z: f64,
    pub free_energy: f64,
    pub expected_h: f64,
    pub kl: f64,
    /// Tolerance within which `free_energy = expected_h + kl/β` is expected to
    /// hold for the backend that produced this report.
    pub tolerance: f64,
}

/// `H(x,u) = ½uᵀMu + uᵀ(Gx + g) + ½xᵀWx + wᵀx + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticHamiltonian {
    /// `M`, m×m.
    pub uu: DMatrix<f64>,
    /// `G`, m×n.
    pub ux: DMatrix<f64>,
    /// `g`, length m.
    pub u: DVector<f64>,
    /// `W`, n×n.
    pub xx: DMatrix<f64>,
    /// `w`, length n.
    pub x: DVector<f64>,
    pub c: f64,
}

impl QuadraticHamiltonian {
    /// A Hamiltonian that depends on `u` only.
    pub fn input_only(uu: DMatrix<f64>, u: DVector<f64>, state_dim: usize) -> Self {
        let m = uu.nrows();
        Self {
            uu,
            ux: DMatrix::zeros(m, state_dim),
            u,
            xx: DMatrix::zeros(state_dim, state_dim),
            x: DVector::zeros(state_dim),
            c: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.uu.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.xx.nrows()
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.uu * u)) + u.dot(&self.linear_in_u(x)) + self.state_part(x)
    }

    /// `Gx + g`.
    pub fn linear_in_u(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.ux * x + &self.u
    }

    /// `½xᵀWx + wᵀx + c`.
    pub fn state_part(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.xx * x)) + self.x.dot(x) + self.c
    }

    /// Coefficient of the part of `H` linear in `x`: `Gᵀu + w`.
    pub fn state_gradient_coefficient(&self, u: &DVector<f64>) -> DVector<f64> {
        self.ux.tr_mul(u) + &self.x
    }

    /// `E[H(x,U)]` for `U ~ dist`.
    pub fn expected(&self, x: &DVector<f64>, dist: &Gaussian) -> f64 {
        let mu = dist.mean();
        0.5 * ((&self.uu * dist.cov()).trace() + mu.dot(&(&self.uu * mu))) + mu.dot(&self.linear_in_u(x)) + self.state_part(x)
    }
}

/// Gibbs measure over a finite input set `{0, …, k-1}`.
pub struct FiniteGibbs<H> {
    prior: Vec<f64>,
    log_prior: Vec<f64>,
    hamiltonian: H,
    beta: f64,
}

impl<H> FiniteGibbs<H>
where
    H: Fn(&DVector<f64>, usize) -> f64,
{
    /// `prior` must be nonnegative with positive sum; it is renormalized.
    pub fn new(prior: Vec<f64>, hamiltonian: H, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if prior.is_empty() || prior.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter("prior must be a nonempty nonnegative vector".into()));
        }
        let total: f64 = prior.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("prior has zero mass".into()));
        }
        let prior: Vec<f64> = prior.iter().map(|p| p / total).collect();
        let log_prior = prior.iter().map(|p| p.ln()).collect();
        Ok(Self { prior, log_prior, hamiltonian, beta })
    }

    pub fn uniform(n: usize, hamiltonian: H, beta: f64) -> Result<Self> {
        Self::new(vec![1.0; n], hamiltonian, beta)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn hamiltonian(&self, x: &DVector<f64>, i: usize) -> f64 {
        (self.hamiltonian)(x, i)
    }

    fn log_weights(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.log_prior
            .iter()
            .enumerate()
            .map(|(i, lp)| {
                if *lp == f64::NEG_INFINITY {
                    return Ok(f64::NEG_INFINITY);
                }
                let h = (self.hamiltonian)(x, i);
                if h.is_nan() || h == f64::NEG_INFINITY {
                    return Err(Error::DivergingMechanism { what: format!("H(x, {i}) = {h}") });
                }
                Ok(lp - self.beta * h)
            })
            .collect()
    }

    pub fn log_partition(&self, x: &DVector<f64>) -> Result<f64> {
        let lz = log_sum_exp(&self.log_weights(x)?);
        if !lz.is_finite() {
            return Err(Error::DivergingMechanism { what: format!("log Z = {lz}") });
        }
        Ok(lz)
    }

    pub fn partition_function(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_partition(x)?.exp())
    }

    /// `U^β(x){i}` for every input.
    pub fn densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let lw = self.log_weights(x)?;
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DivergingMechanism { what: format!("max log weight = {max}") });
        }
        let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.iter().map(|wi| wi / total).collect())
    }

    pub fn density(&self, x: &DVector<f64>, i: usize) -> Result<f64> {
        Ok(self.densities(x)?[i])
    }

    pub fn log_density(&self, x: &DVector<f64>, i: usize) -> Result<f64> {
        let lw = self.log_weights(x)?;
        Ok(lw[i] - log_sum_exp(&lw))
    }

    pub fn kl_to_prior(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.densities(x)?;
        Ok(kl_finite(&p, &self.prior))
    }

    pub fn free_energy(&self, x: &DVector<f64>) -> Result<FreeEnergyReport> {
        let log_z = self.log_partition(x)?;
        let p = self.densities(x)?;
        let expected_h = p
            .iter()
            .enumerate()
            .filter(|(_, pi)| **pi > 0.0)
            .map(|(i, pi)| pi * (self.hamiltonian)(x, i))
            .sum();
        Ok(FreeEnergyReport {
            state: x.iter().copied().collect(),
            z: log_z.exp(),
            log_z,
            free_energy: -log_z / self.beta,
            expected_h,
            kl: kl_finite(&p, &self.prior),
            tolerance: 1e-12,
        })
    }

    pub fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<usize> {
        let p = self.densities(x)?;
        Ok(sample_categorical(&p, rng))
    }

    /// The `β = ∞` mode: an input of minimal Hamiltonian among those with
    /// positive prior mass (first index on ties).
    pub fn argmin(&self, x: &DVector<f64>) -> usize {
        (0..self.len())
            .filter(|i| self.prior[*i] > 0.0)
            .min_by(|a, b| (self.hamiltonian)(x, *a).total_cmp(&(self.hamiltonian)(x, *b)))
            .expect("prior has positive mass")
    }

    /// `(F^β(x), E_alt[H] + D[alt ‖ Ū]/β)`; the first never exceeds the second.
    /// `alternative` must vanish wherever the prior does.
    pub fn variational_check(&self, x: &DVector<f64>, alternative: &[f64]) -> Result<(f64, f64)> {
        if alternative.len() != self.len() {
            return Err(Error::Dimension(format!("alternative has {} entries, expected {}", alternative.len(), self.len())));
        }
        let total: f64 = alternative.iter().sum();
        let alt: Vec<f64> = alternative.iter().map(|a| a / total).collect();
        if alt.iter().zip(&self.prior).any(|(a, p)| *a > 0.0 && *p == 0.0) {
            return Err(Error::InvalidParameter("alternative is not absolutely continuous w.r.t. the prior".into()));
        }
        let lhs = -self.log_partition(x)? / self.beta;
        let eh: f64 = alt
            .iter()
            .enumerate()
            .filter(|(_, a)| **a > 0.0)
            .map(|(i, a)| a * (self.hamiltonian)(x, i))
            .sum();
        Ok((lhs, eh + kl_finite(&alt, &self.prior) / self.beta))
    }
}

/// `Σ p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_finite(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

pub fn sample_categorical(p: &[f64], rng: &mut dyn RngCore) -> usize {
    let r: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, pi) in p.iter().enumerate() {
        if *pi > 0.0 {
            acc += pi;
            last = i;
            if r < acc {
                return i;
            }
        }
    }
    last
}

/// Gaussian prior with a Hamiltonian quadratic in `u`; the Gibbs measure is
/// Gaussian with precision `βM + Σ⁻¹` and mean `Λ⁻¹(Σ⁻¹m − β(Gx + g))`.
#[derive(Debug, Clone)]
pub struct GaussianGibbs {
    prior: Gaussian,
    hamiltonian: QuadraticHamiltonian,
    beta: f64,
    precision: DMatrix<f64>,
    posterior_cov: DMatrix<f64>,
    log_det_ratio: f64,
    prior_precision_mean: DVector<f64>,
}

impl GaussianGibbs {
    pub fn new(prior: Gaussian, hamiltonian: QuadraticHamiltonian, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if hamiltonian.input_dim() != prior.dim() {
            return Err(Error::Dimension(format!(
                "Hamiltonian input dimension {} vs prior dimension {}",
                hamiltonian.input_dim(),
                prior.dim()
            )));
        }
        let precision = &hamiltonian.uu * beta + prior.precision();
        let chol = cholesky(&precision, "Gibbs precision").map_err(|_| Error::DivergingMechanism {
            what: "βM + Σ⁻¹ is not positive definite".into(),
        })?;
        // log|ΣΛ| = log|Σ| + log|Λ|
        let log_det_ratio = prior.log_det_cov() + log_det(&chol);
        let posterior_cov = chol.inverse();
        let prior_precision_mean = prior.solve(prior.mean());
        Ok(Self { prior, hamiltonian, beta, precision, posterior_cov, log_det_ratio, prior_precision_mean })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prior(&self) -> &Gaussian {
        &self.prior
    }

    pub fn hamiltonian(&self) -> &QuadraticHamiltonian {
        &self.hamiltonian
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    fn information(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.prior_precision_mean - self.hamiltonian.linear_in_u(x) * self.beta
    }

    pub fn posterior_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.posterior_cov * self.information(x)
    }

    pub fn posterior(&self, x: &DVector<f64>) -> Result<Gaussian> {
        Gaussian::new(self.posterior_mean(x), self.posterior_cov.clone())
    }

    pub fn log_partition(&self, x: &DVector<f64>) -> Result<f64> {
        let h = self.information(x);
        let mu = &self.posterior_cov * &h;
        let m = self.prior.mean();
        let lz = 0.5 * h.dot(&mu) - 0.5 * m.dot(&self.prior_precision_mean) - self.beta * self.hamiltonian.state_part(x)
            - 0.5 * self.log_det_ratio;
        if !lz.is_finite() {
            return Err(Error::DivergingMechanism { what: format!("log Z = {lz}") });
        }
        Ok(lz)
    }

    pub fn partition_function(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_partition(x)?.exp())
    }

    pub fn log_density(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(self.posterior(x)?.log_density(u))
    }

    pub fn density(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(self.log_density(x, u)?.exp())
    }

    pub fn kl_to_prior(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.posterior(x)?.kl_to(&self.prior))
    }

    pub fn free_energy(&self, x: &DVector<f64>) -> Result<FreeEnergyReport> {
        let log_z = self.log_partition(x)?;
        let post = self.posterior(x)?;
        let expected_h = self.hamiltonian.expected(x, &post);
        let kl = post.kl_to(&self.prior);
        let scale = 1.0 + expected_h.abs() + kl / self.beta;
        Ok(FreeEnergyReport {
            state: x.iter().copied().collect(),
            z: log_z.exp(),
            log_z,
            free_energy: -log_z / self.beta,
            expected_h,
            kl,
            tolerance: 1e-9 * scale,
        })
    }

    pub fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(self.posterior(x)?.sample(rng))
    }

    /// `(F^β(x), E_alt[H] + D[alt ‖ Ū]/β)` in closed form.
    pub fn variational_check(&self, x: &DVector<f64>, alternative: &Gaussian) -> Result<(f64, f64)> {
        let lhs = -self.log_partition(x)? / self.beta;
        let rhs = self.hamiltonian.expected(x, alternative) + alternative.kl_to(&self.prior) / self.beta;
        Ok((lhs, rhs))
    }
}

/// Monte Carlo estimate of `log Z` from prior samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub log_z: f64,
    pub z: f64,
    /// Standard error of `z`.
    pub std_error: f64,
    pub ess: f64,
    pub n_samples: usize,
}

/// Gibbs measure estimated by sampling the (Gaussian) prior.
pub struct MonteCarloGibbs<H> {
    prior: Gaussian,
    hamiltonian: H,
    beta: f64,
    n_samples: usize,
}

struct WeightedSample {
    inputs: Vec<DVector<f64>>,
    energies: Vec<f64>,
    weights: Vec<f64>,
    estimate: PartitionEstimate,
}

impl<H> MonteCarloGibbs<H>
where
    H: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    pub fn new(prior: Gaussian, hamiltonian: H, beta: f64, n_samples: usize) -> Result<Self> {
        check_beta(beta)?;
        if n_samples < 2 {
            return Err(Error::TooFewSamples { got: n_samples, min: 2 });
        }
        Ok(Self { prior, hamiltonian, beta, n_samples })
    }

    pub fn with_default_samples(prior: Gaussian, hamiltonian: H, beta: f64) -> Result<Self> {
        Self::new(prior, hamiltonian, beta, DEFAULT_MC_SAMPLES)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    fn draw(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<WeightedSample> {
        let inputs: Vec<DVector<f64>> = (0..self.n_samples).map(|_| self.prior.sample(rng)).collect();
        let energies: Vec<f64> = inputs.iter().map(|u| (self.hamiltonian)(x, u)).collect();
        let logw: Vec<f64> = energies.iter().map(|h| -self.beta * h).collect();
        if logw.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::DivergingMechanism { what: "non-finite Hamiltonian sample".into() });
        }
        let lse = log_sum_exp(&logw);
        if lse == f64::NEG_INFINITY {
            return Err(Error::UnreliableEstimate { ess: 0.0, min: MIN_ESS });
        }
        let weights: Vec<f64> = logw.iter().map(|w| (w - lse).exp()).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let n = self.n_samples as f64;
        let log_z = lse - n.ln();
        let z = log_z.exp();
        // sd of exp(-βH) relative to its max, rescaled
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = logw.iter().map(|w| (w - max).exp()).collect();
        let (_, sd) = crate::system::mean_std(&scaled);
        let std_error = sd * max.exp() / n.sqrt();
        let estimate = PartitionEstimate { log_z, z, std_error, ess, n_samples: self.n_samples };
        if ess < MIN_ESS {
            return Err(Error::UnreliableEstimate { ess, min: MIN_ESS });
        }
        Ok(WeightedSample { inputs, energies, weights, estimate })
    }

    pub fn partition_function(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<PartitionEstimate> {
        Ok(self.draw(x, rng)?.estimate)
    }

    /// Self-normalized estimate `Σ ŵ_i (−βH_i) − log Ẑ`.
    pub fn kl_to_prior(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<f64> {
        let s = self.draw(x, rng)?;
        let e: f64 = s.weights.iter().zip(&s.energies).map(|(w, h)| w * h).sum();
        Ok((-self.beta * e - s.estimate.log_z).max(0.0))
    }

    pub fn free_energy(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<FreeEnergyReport> {
        let s = self.draw(x, rng)?;
        let expected_h: f64 = s.weights.iter().zip(&s.energies).map(|(w, h)| w * h).sum();
        let kl = -self.beta * expected_h - s.estimate.log_z;
        let rel = s.estimate.std_error / s.estimate.z.max(f64::MIN_POSITIVE);
        Ok(FreeEnergyReport {
            state: x.iter().copied().collect(),
            z: s.estimate.z,
            log_z: s.estimate.log_z,
            free_energy: -s.estimate.log_z / self.beta,
            expected_h,
            kl,
            tolerance: 3.0 * rel / self.beta + 1e-12,
        })
    }

    /// `Ū{u} exp(−βH(x,u)) / Ẑ`.
    pub fn density(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut dyn RngCore) -> Result<f64> {
        let est = self.partition_function(x, rng)?;
        Ok((self.prior.log_density(u) - self.beta * (self.hamiltonian)(x, u) - est.log_z).exp())
    }

    /// Resamples one prior draw by its Gibbs weight.
    pub fn sample(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let mut s = self.draw(x, rng)?;
        let i = sample_categorical(&s.weights, rng);
        Ok(s.inputs.swap_remove(i))
    }

    /// Monte Carlo `lhs`; the alternative's expected energy is sampled and its
    /// relative entropy is closed form.
    pub fn variational_check(&self, x: &DVector<f64>, alternative: &Gaussian, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
        let lhs = -self.partition_function(x, rng)?.log_z / self.beta;
        let eh = (0..self.n_samples).map(|_| (self.hamiltonian)(x, &alternative.sample(rng))).sum::<f64>()
            / self.n_samples as f64;
        Ok((lhs, eh + alternative.kl_to(&self.prior) / self.beta))
    }
}

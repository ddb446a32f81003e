//! Sampling approximations of the Gibbs controller over input sequences:
//! self-normalized importance sampling and Stein variational gradient descent,
//! plus a receding-horizon wrapper that turns either into a [`Policy`].
//!
//! Input sequences are flattened as `[u_{t0}; u_{t0+1}; …; u_{t_f−1}]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, symmetrize, Gaussian};
use crate::gibbs::{log_sum_exp, sample_categorical};
use crate::system::{ControlSystem, Controller, DifferentiableSystem, NullNoise, Policy};

pub const DEFAULT_IS_SAMPLES: usize = 2048;
pub const FD_STEP: f64 = 1e-5;
pub const MAX_HALVINGS: usize = 10;

/// The model used for planning, with or without analytic gradients.
#[derive(Clone, Copy)]
pub enum Model<'a> {
    Plain(&'a dyn ControlSystem),
    Differentiable(&'a dyn DifferentiableSystem),
}

impl<'a> Model<'a> {
    pub fn system(&self) -> &'a dyn ControlSystem {
        match *self {
            Model::Plain(s) => s,
            Model::Differentiable(s) => s,
        }
    }
}

/// Total cost-to-go of an input sequence from `(t0, x0)` under the
/// noise-free dynamics.
#[derive(Clone)]
pub struct TrajectoryHamiltonian<'a> {
    model: Model<'a>,
    t0: usize,
    x0: DVector<f64>,
}

impl<'a> TrajectoryHamiltonian<'a> {
    pub fn new(model: Model<'a>, t0: usize, x0: DVector<f64>) -> Result<Self> {
        let sys = model.system();
        if t0 >= sys.horizon() {
            return Err(Error::InvalidParameter(format!("start time {t0} is past the horizon {}", sys.horizon())));
        }
        if x0.len() != sys.state_dim() {
            return Err(Error::Dimension(format!("state has length {}, expected {}", x0.len(), sys.state_dim())));
        }
        Ok(Self { model, t0, x0 })
    }

    pub fn start_time(&self) -> usize {
        self.t0
    }

    pub fn remaining(&self) -> usize {
        self.model.system().horizon() - self.t0
    }

    pub fn input_dim(&self) -> usize {
        self.model.system().input_dim()
    }

    /// Length of the flattened sequence.
    pub fn dim(&self) -> usize {
        self.remaining() * self.input_dim()
    }

    pub fn split(&self, flat: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.input_dim();
        (0..self.remaining()).map(|k| flat.rows(k * m, m).into_owned()).collect()
    }

    fn states(&self, flat: &DVector<f64>) -> (Vec<DVector<f64>>, f64) {
        let sys = self.model.system();
        let m = self.input_dim();
        let mut states = Vec::with_capacity(self.remaining() + 1);
        let mut x = self.x0.clone();
        let mut total = 0.0;
        for k in 0..self.remaining() {
            let t = self.t0 + k;
            let u = flat.rows(k * m, m).into_owned();
            total += sys.stage_cost(t, &x, &u);
            if total == f64::INFINITY {
                states.push(x);
                return (states, total);
            }
            let next = sys.step(t, &x, &u, &mut NullNoise);
            states.push(std::mem::replace(&mut x, next));
        }
        total += sys.terminal_cost(&x);
        states.push(x);
        (states, total)
    }

    /// Cost of the flattened sequence; non-finite results become `+∞`.
    pub fn evaluate(&self, flat: &DVector<f64>) -> f64 {
        let c = self.states(flat).1;
        if c.is_nan() {
            f64::INFINITY
        } else {
            c
        }
    }

    /// Gradient by the adjoint recursion when the model is differentiable,
    /// otherwise central differences with step [`FD_STEP`].
    pub fn gradient(&self, flat: &DVector<f64>) -> DVector<f64> {
        match self.model {
            Model::Differentiable(sys) => self.adjoint_gradient(sys, flat),
            Model::Plain(_) => self.finite_difference_gradient(flat),
        }
    }

    fn adjoint_gradient(&self, sys: &dyn DifferentiableSystem, flat: &DVector<f64>) -> DVector<f64> {
        let m = self.input_dim();
        let (states, cost) = self.states(flat);
        if !cost.is_finite() {
            return DVector::from_element(flat.len(), f64::NAN);
        }
        let n = self.remaining();
        let mut grad = DVector::zeros(flat.len());
        let mut lambda = sys.terminal_cost_grad(&states[n]);
        for k in (0..n).rev() {
            let t = self.t0 + k;
            let u = flat.rows(k * m, m).into_owned();
            let (gx, gu) = sys.stage_cost_grad(t, &states[k], &u);
            let (vx, vu) = sys.step_vjp(t, &states[k], &u, &lambda);
            grad.rows_mut(k * m, m).copy_from(&(gu + vu));
            lambda = gx + vx;
        }
        grad
    }

    pub fn finite_difference_gradient(&self, flat: &DVector<f64>) -> DVector<f64> {
        let mut probe = flat.clone();
        DVector::from_iterator(
            flat.len(),
            (0..flat.len()).map(|i| {
                let v = flat[i];
                probe[i] = v + FD_STEP;
                let up = self.evaluate(&probe);
                probe[i] = v - FD_STEP;
                let down = self.evaluate(&probe);
                probe[i] = v;
                (up - down) / (2.0 * FD_STEP)
            }),
        )
    }
}

/// A distribution over flattened input sequences starting at time `t0`.
pub trait SequencePrior: Sync {
    fn sample(&self, t0: usize, rng: &mut dyn RngCore) -> DVector<f64>;
    fn log_density(&self, t0: usize, flat: &DVector<f64>) -> f64;
    fn grad_log_density(&self, t0: usize, flat: &DVector<f64>) -> DVector<f64>;
    /// The Gaussian form when there is one; enables whitening.
    fn gaussian(&self, _t0: usize) -> Option<&Gaussian> {
        None
    }
}

/// Gaussian prior over the whole horizon; the prior on a suffix is its
/// marginal.
#[derive(Debug, Clone)]
pub struct GaussianSequencePrior {
    input_dim: usize,
    suffixes: Vec<Gaussian>,
}

impl GaussianSequencePrior {
    pub fn new(input_dim: usize, full: Gaussian) -> Result<Self> {
        if input_dim == 0 || full.dim() % input_dim != 0 {
            return Err(Error::Dimension(format!("dimension {} is not a multiple of {input_dim}", full.dim())));
        }
        let horizon = full.dim() / input_dim;
        let suffixes = (0..horizon)
            .map(|t0| {
                let start = t0 * input_dim;
                let len = full.dim() - start;
                let mean = full.mean().rows(start, len).into_owned();
                let cov = full.cov().view((start, start), (len, len)).into_owned();
                Gaussian::new(mean, cov)
            })
            .collect::<Result<_>>()?;
        Ok(Self { input_dim, suffixes })
    }

    /// Independent steps `u_t ~ N(m_t, Σ_t)`.
    pub fn independent(steps: &[Gaussian]) -> Result<Self> {
        let m = steps.first().ok_or_else(|| Error::InvalidParameter("empty prior".into()))?.dim();
        let n = steps.len() * m;
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        for (t, g) in steps.iter().enumerate() {
            if g.dim() != m {
                return Err(Error::Dimension("prior steps differ in dimension".into()));
            }
            mean.rows_mut(t * m, m).copy_from(g.mean());
            cov.view_mut((t * m, t * m), (m, m)).copy_from(g.cov());
        }
        Self::new(m, Gaussian::new(mean, cov)?)
    }

    /// Zero mean, `Cov(u_s, u_t) = sd² exp(−(s−t)²/(2ℓ²)) I`, white for `ℓ = 0`.
    pub fn squared_exponential(input_dim: usize, horizon: usize, sd: f64, length_scale: f64) -> Result<Self> {
        if !(sd > 0.0) || !(length_scale >= 0.0) {
            return Err(Error::InvalidParameter("prior sd must be positive and length scale nonnegative".into()));
        }
        let n = horizon * input_dim;
        let mut cov = DMatrix::zeros(n, n);
        for s in 0..horizon {
            for t in 0..horizon {
                let k = if s == t {
                    sd * sd * (1.0 + 1e-8)
                } else if length_scale == 0.0 {
                    0.0
                } else {
                    sd * sd * (-((s as f64 - t as f64).powi(2)) / (2.0 * length_scale * length_scale)).exp()
                };
                for i in 0..input_dim {
                    cov[(s * input_dim + i, t * input_dim + i)] = k;
                }
            }
        }
        Self::new(input_dim, Gaussian::new(DVector::zeros(n), cov)?)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn horizon(&self) -> usize {
        self.suffixes.len()
    }

    pub fn suffix(&self, t0: usize) -> &Gaussian {
        &self.suffixes[t0]
    }
}

impl SequencePrior for GaussianSequencePrior {
    fn sample(&self, t0: usize, rng: &mut dyn RngCore) -> DVector<f64> {
        self.suffixes[t0].sample(rng)
    }

    fn log_density(&self, t0: usize, flat: &DVector<f64>) -> f64 {
        self.suffixes[t0].log_density(flat)
    }

    fn grad_log_density(&self, t0: usize, flat: &DVector<f64>) -> DVector<f64> {
        self.suffixes[t0].grad_log_density(flat)
    }

    fn gaussian(&self, t0: usize) -> Option<&Gaussian> {
        Some(&self.suffixes[t0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsDiagnostics {
    pub n_samples: usize,
    /// Samples with finite cost.
    pub n_feasible: usize,
    /// `1 / Σ ŵ²`.
    pub ess: f64,
    /// `log((1/n) Σ exp(−β H_i))`, an estimate of `log Z`.
    pub log_z: f64,
    pub chosen_index: usize,
    pub chosen_cost: f64,
}

/// Output of [`importance_weights`].
#[derive(Debug, Clone)]
pub struct WeightedSamples {
    pub samples: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    pub log_z: f64,
}

/// Self-normalized weights `ŵ_i ∝ exp(−β H_i)`, with `H_i = ∞` weighted 0.
/// For `β = ∞` the mass is spread evenly over the minimum-cost samples.
pub fn normalized_weights(costs: &[f64], beta: f64) -> Option<(Vec<f64>, f64)> {
    if beta == f64::INFINITY {
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return None;
        }
        let k = costs.iter().filter(|&&c| c == best).count() as f64;
        let w = costs.iter().map(|&c| if c == best { 1.0 / k } else { 0.0 }).collect();
        return Some((w, f64::NEG_INFINITY));
    }
    let logw: Vec<f64> = costs.iter().map(|&c| if c.is_finite() { -beta * c } else { f64::NEG_INFINITY }).collect();
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return None;
    }
    Some((logw.iter().map(|l| (l - lse).exp()).collect(), lse))
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Draws `n_samples` prior sequences and weighs them; costs are evaluated in
/// parallel and draws are made serially from `rng`.
pub fn importance_weights(
    ham: &TrajectoryHamiltonian,
    prior: &dyn SequencePrior,
    beta: f64,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<WeightedSamples> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples { got: n_samples, min: 2 });
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be nonnegative, got {beta}")));
    }
    let samples: Vec<DVector<f64>> = (0..n_samples).map(|_| prior.sample(ham.start_time(), rng)).collect();
    let costs: Vec<f64> = samples.par_iter().map(|u| ham.evaluate(u)).collect();
    let (weights, lse) = normalized_weights(&costs, beta).ok_or(Error::InfeasibleProposal { n_samples })?;
    let ess = effective_sample_size(&weights);
    Ok(WeightedSamples { samples, costs, weights, ess, log_z: lse - (n_samples as f64).ln() })
}

/// Returns one sequence resampled by importance weights.
pub fn importance_sample_control(
    ham: &TrajectoryHamiltonian,
    prior: &dyn SequencePrior,
    beta: f64,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(DVector<f64>, IsDiagnostics)> {
    let ws = importance_weights(ham, prior, beta, n_samples, rng)?;
    let i = sample_categorical(&ws.weights, rng);
    let diag = IsDiagnostics {
        n_samples,
        n_feasible: ws.costs.iter().filter(|c| c.is_finite()).count(),
        ess: ws.ess,
        log_z: ws.log_z,
        chosen_index: i,
        chosen_cost: ws.costs[i],
    };
    Ok((ws.samples[i].clone(), diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// `h = median ‖x_i − x_j‖² / (2 ln(n + 1))`, recomputed every iteration.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    Identity,
    /// Update in coordinates whitened by the Gaussian prior, `u = m + L z`.
    PriorWhitening,
    /// Whitened by the Laplace covariance `(β ∇²H + Σ⁻¹)⁻¹` at the prior mean,
    /// with negative Hessian curvature clipped to zero. Argmin mode uses `β = 1`.
    LocalLaplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvgdMode {
    /// Uniform draw from the final particles.
    Sample,
    /// Independent gradient descent on `H` from prior draws; the lowest-cost
    /// particle is returned.
    Argmin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgdConfig {
    pub n_particles: usize,
    pub n_iterations: usize,
    pub step_size: f64,
    pub bandwidth: Bandwidth,
    pub beta: f64,
    pub preconditioner: Preconditioner,
    pub mode: SvgdMode,
    /// Record every particle at every iteration.
    pub trace: bool,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            n_particles: 32,
            n_iterations: 200,
            step_size: 1e-2,
            bandwidth: Bandwidth::MedianHeuristic,
            beta: 1.0,
            preconditioner: Preconditioner::Identity,
            mode: SvgdMode::Sample,
            trace: false,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_particles > 0
            && self.n_iterations > 0
            && self.step_size > 0.0
            && self.beta > 0.0
            && match self.bandwidth {
                Bandwidth::Fixed(h) => h > 0.0,
                Bandwidth::MedianHeuristic => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid SVGD configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub particle: usize,
    pub inputs: Vec<f64>,
    pub cost: f64,
}

pub fn write_trace_json_lines<W: Write>(mut out: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    for r in trace {
        let cost = if r.cost.is_finite() { serde_json::json!(r.cost) } else { serde_json::Value::Null };
        let line = serde_json::json!({"iteration": r.iteration, "particle": r.particle, "inputs": r.inputs, "cost": cost});
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SvgdOutput {
    pub choice: DVector<f64>,
    pub chosen_index: usize,
    pub particles: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    /// Total step halvings over the run.
    pub halvings: usize,
    pub final_step: f64,
    pub trace: Vec<TraceRecord>,
}

/// Affine map between sequence coordinates and update coordinates.
struct Coordinates {
    mean: DVector<f64>,
    l: Option<DMatrix<f64>>,
}

impl Coordinates {
    fn to_inputs(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.l {
            Some(l) => &self.mean + l * z,
            None => z.clone(),
        }
    }

    fn from_inputs(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.l {
            Some(l) => l.clone().solve_lower_triangular(&(u - &self.mean)).expect("Cholesky factor is invertible"),
            None => u.clone(),
        }
    }

    fn pull_back(&self, g: DVector<f64>) -> DVector<f64> {
        match &self.l {
            Some(l) => l.tr_mul(&g),
            None => g,
        }
    }
}

fn median_bandwidth(z: &[DVector<f64>]) -> f64 {
    let n = z.len();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push((&z[i] - &z[j]).norm_squared());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    let med = if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) };
    let h = med / (2.0 * ((n + 1) as f64).ln());
    if h > 0.0 {
        h
    } else {
        1.0
    }
}

/// `φ(z_i) = (1/n) Σ_j k(z_j, z_i) [∇ log p(z_j) + (z_i − z_j)/h]`,
/// `k(a, b) = exp(−‖a − b‖² / (2h))`.
fn stein_direction(z: &[DVector<f64>], grads: &[DVector<f64>], h: f64) -> Vec<DVector<f64>> {
    let n = z.len() as f64;
    (0..z.len())
        .into_par_iter()
        .map(|i| {
            let mut phi = DVector::zeros(z[i].len());
            for (zj, gj) in z.iter().zip(grads) {
                let diff = &z[i] - zj;
                let k = (-diff.norm_squared() / (2.0 * h)).exp();
                phi += (gj + diff / h) * k;
            }
            phi / n
        })
        .collect()
}

/// Finite-difference Hessian of `H` at `at`, symmetrized, with per-coordinate
/// steps proportional to `scale`.
pub fn hamiltonian_hessian(ham: &TrajectoryHamiltonian, at: &DVector<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    let n = at.len();
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let eps = 1e-3 * scale[j].max(f64::MIN_POSITIVE);
            let mut up = at.clone();
            up[j] += eps;
            let mut down = at.clone();
            down[j] -= eps;
            (ham.gradient(&up) - ham.gradient(&down)) / (2.0 * eps)
        })
        .collect();
    symmetrize(&DMatrix::from_columns(&cols))
}

/// Lower Cholesky factor of `(w ∇²H₊ + Σ⁻¹)⁻¹` at the prior mean.
fn laplace_factor(ham: &TrajectoryHamiltonian, prior: &Gaussian, weight: f64) -> Result<DMatrix<f64>> {
    let scale = prior.cov().diagonal().map(f64::sqrt);
    let hess = hamiltonian_hessian(ham, prior.mean(), &scale);
    if hess.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { what: "Laplace precision (non-finite Hessian)".into() });
    }
    let eig = hess.symmetric_eigen();
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    let curvature = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    let precision = symmetrize(&(curvature * weight + prior.precision()));
    let cov = cholesky(&precision, "Laplace precision")?.inverse();
    Ok(cholesky(&symmetrize(&cov), "Laplace covariance")?.l())
}

/// Stein variational approximation of `prior · exp(−βH)`.
pub fn svgd_sample_control(
    ham: &TrajectoryHamiltonian,
    prior: &dyn SequencePrior,
    config: &SvgdConfig,
    rng: &mut dyn RngCore,
) -> Result<SvgdOutput> {
    config.validate()?;
    let t0 = ham.start_time();
    let initial: Vec<DVector<f64>> = (0..config.n_particles).map(|_| prior.sample(t0, rng)).collect();
    svgd_from_particles(ham, prior, config, initial, rng)
}

/// [`svgd_sample_control`] from given initial particles.
pub fn svgd_from_particles(
    ham: &TrajectoryHamiltonian,
    prior: &dyn SequencePrior,
    config: &SvgdConfig,
    initial: Vec<DVector<f64>>,
    rng: &mut dyn RngCore,
) -> Result<SvgdOutput> {
    config.validate()?;
    let t0 = ham.start_time();
    let coords = match config.preconditioner {
        Preconditioner::Identity => Coordinates { mean: DVector::zeros(0), l: None },
        Preconditioner::PriorWhitening => {
            let g = prior
                .gaussian(t0)
                .ok_or_else(|| Error::InvalidParameter("prior whitening needs a Gaussian prior".into()))?;
            Coordinates { mean: g.mean().clone(), l: Some(g.chol_factor().clone()) }
        }
        Preconditioner::LocalLaplace => {
            let g = prior
                .gaussian(t0)
                .ok_or_else(|| Error::InvalidParameter("Laplace whitening needs a Gaussian prior".into()))?;
            let weight = if config.mode == SvgdMode::Argmin { 1.0 } else { config.beta };
            let l = laplace_factor(ham, g, weight)?;
            Coordinates { mean: g.mean().clone(), l: Some(l) }
        }
    };
    let beta = config.beta;
    let argmin = config.mode == SvgdMode::Argmin;
    // per-particle cost; an increase of its mean over the particles counts as overshoot
    let objective = |u: &DVector<f64>| {
        if argmin {
            ham.evaluate(u)
        } else {
            beta * ham.evaluate(u) - prior.log_density(t0, u)
        }
    };
    let consensus = |zs: &[DVector<f64>]| -> f64 {
        let costs: Vec<f64> = zs.par_iter().map(|z| objective(&coords.to_inputs(z))).collect();
        costs.iter().sum::<f64>() / zs.len() as f64
    };
    let mut z: Vec<DVector<f64>> = initial.iter().map(|u| coords.from_inputs(u)).collect();
    let mut step = config.step_size;
    let mut halvings = 0;
    let mut trace = Vec::new();
    let record = |trace: &mut Vec<TraceRecord>, iteration: usize, z: &[DVector<f64>]| {
        for (i, zi) in z.iter().enumerate() {
            let u = coords.to_inputs(zi);
            let cost = ham.evaluate(&u);
            trace.push(TraceRecord { iteration, particle: i, inputs: u.iter().copied().collect(), cost });
        }
    };
    if config.trace {
        record(&mut trace, 0, &z);
    }
    let mut current = consensus(&z);
    for iteration in 1..=config.n_iterations {
        // gradient of log target (or of −H for argmin) in update coordinates
        let grads: Vec<DVector<f64>> = z
            .par_iter()
            .map(|zi| {
                let u = coords.to_inputs(zi);
                let gh = ham.gradient(&u);
                let g = if argmin { -gh } else { prior.grad_log_density(t0, &u) - gh * beta };
                coords.pull_back(g)
            })
            .collect();
        if let Some(particle) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient { particle, iteration });
        }
        let directions = if argmin {
            grads.clone()
        } else {
            let h = match config.bandwidth {
                Bandwidth::MedianHeuristic => median_bandwidth(&z),
                Bandwidth::Fixed(h) => h,
            };
            stein_direction(&z, &grads, h)
        };
        // first-order change of the mean objective per unit step; repulsion can
        // make it positive, and such an increase is not an overshoot
        let slope = -grads.iter().zip(&directions).map(|(g, d)| g.dot(d)).sum::<f64>() / z.len() as f64;
        let mut tries = 0;
        loop {
            let proposal: Vec<DVector<f64>> = z.iter().zip(&directions).map(|(zi, d)| zi + d * step).collect();
            let next = consensus(&proposal);
            let allowed = 2.0 * (slope * step).max(0.0) + 1e-12 * current.abs();
            if next - current <= allowed {
                z = proposal;
                current = next;
                break;
            }
            tries += 1;
            halvings += 1;
            if tries > MAX_HALVINGS {
                return Err(Error::StepSizeExhausted { iteration, halvings: MAX_HALVINGS });
            }
            step *= 0.5;
        }
        if config.trace {
            record(&mut trace, iteration, &z);
        }
    }
    let particles: Vec<DVector<f64>> = z.iter().map(|zi| coords.to_inputs(zi)).collect();
    let costs: Vec<f64> = particles.par_iter().map(|u| ham.evaluate(u)).collect();
    let chosen_index = if argmin {
        costs.iter().enumerate().fold(0, |best, (i, c)| if *c < costs[best] { i } else { best })
    } else {
        rng.random_range(0..particles.len())
    };
    Ok(SvgdOutput { choice: particles[chosen_index].clone(), chosen_index, particles, costs, halvings, final_step: step, trace })
}

/// Which sequence sampler a receding-horizon controller calls.
#[derive(Debug, Clone, PartialEq)]
pub enum Planner {
    ImportanceSampling { beta: f64, n_samples: usize },
    Svgd(SvgdConfig),
}

impl Planner {
    pub fn plan(&self, ham: &TrajectoryHamiltonian, prior: &dyn SequencePrior, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        match self {
            Planner::ImportanceSampling { beta, n_samples } => Ok(importance_sample_control(ham, prior, *beta, *n_samples, rng)?.0),
            Planner::Svgd(cfg) => Ok(svgd_sample_control(ham, prior, cfg, rng)?.choice),
        }
    }
}

/// Re-solves from the current estimate every `replan_every` steps and applies
/// the stored sequence in between.
pub struct RecedingHorizonPolicy<'a> {
    pub model: Model<'a>,
    pub prior: &'a dyn SequencePrior,
    pub planner: Planner,
    pub replan_every: usize,
}

impl<'a> RecedingHorizonPolicy<'a> {
    pub fn new(model: Model<'a>, prior: &'a dyn SequencePrior, planner: Planner, replan_every: usize) -> Result<Self> {
        if replan_every == 0 {
            return Err(Error::InvalidParameter("replan_every must be at least 1".into()));
        }
        Ok(Self { model, prior, planner, replan_every })
    }
}

struct RecedingController<'p, 'a> {
    policy: &'p RecedingHorizonPolicy<'a>,
    plan: Vec<DVector<f64>>,
    plan_start: usize,
}

impl Controller for RecedingController<'_, '_> {
    fn control(&mut self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        let stale = t < self.plan_start || t - self.plan_start >= self.plan.len();
        if t % self.policy.replan_every == 0 || stale {
            let ham = TrajectoryHamiltonian::new(self.policy.model, t, estimate.clone())?;
            let flat = self.policy.planner.plan(&ham, self.policy.prior, rng)?;
            self.plan = ham.split(&flat);
            self.plan_start = t;
        }
        Ok(self.plan[t - self.plan_start].clone())
    }
}

impl Policy for RecedingHorizonPolicy<'_> {
    fn controller(&self) -> Box<dyn Controller + '_> {
        Box::new(RecedingController { policy: self, plan: Vec::new(), plan_start: 0 })
    }
}

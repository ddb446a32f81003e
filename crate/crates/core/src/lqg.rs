//! Bounded-rational LQG: the backward recursion for the Gibbs policy of a
//! linear system with quadratic cost and Gaussian input prior, its LQR limit,
//! and closed-form per-step relative entropies.
//!
//! Costs use the convention `c_t(x,u) = ½(xᵀQx + uᵀRu)`, `c_{t_f}(x) = ½xᵀQ_f x`,
//! so the value functions read `V_t(x) = ½xᵀP_t x + b_tᵀx + d_t`. For the policy
//! returned by [`solve_br_lqg`], `V_t` is the expected cost-to-go of that policy.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{checked_psd, condition_number, symmetrize, Gaussian};
use crate::system::{ControlSystem, DifferentiableSystem, NoiseSource, StepPolicy};

const PSD_TOL: f64 = 1e-10;

/// Square root `L` with `LLᵀ = S` for a positive-semidefinite `S`.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

/// `X_{t+1} = A X_t + B U_t + ε_t` with quadratic costs and a Gaussian input
/// prior per step.
#[derive(Debug, Clone)]
pub struct LqgProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    noise_cov: Vec<DMatrix<f64>>,
    noise_sqrt: Vec<DMatrix<f64>>,
    prior: Vec<Gaussian>,
}

impl LqgProblem {
    /// `noise_cov` may hold one matrix (used at every step) or `horizon` of them.
    /// The horizon is `prior.len()`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_f: DMatrix<f64>,
        noise_cov: Vec<DMatrix<f64>>,
        prior: Vec<Gaussian>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if !a.is_square() || b.nrows() != n {
            return Err(Error::Dimension(format!("A is {}x{}, B is {}x{}", a.nrows(), a.ncols(), b.nrows(), m)));
        }
        if prior.is_empty() {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        if let Some(p) = prior.iter().find(|p| p.dim() != m) {
            return Err(Error::Dimension(format!("prior has dimension {}, input dimension is {m}", p.dim())));
        }
        let q = checked_psd(&q, PSD_TOL, "Q")?;
        let r = checked_psd(&r, PSD_TOL, "R")?;
        let q_f = checked_psd(&q_f, PSD_TOL, "Q_f")?;
        if q.nrows() != n || q_f.nrows() != n || r.nrows() != m {
            return Err(Error::Dimension("cost matrices do not match A and B".into()));
        }
        Cholesky::new(r.clone()).ok_or_else(|| Error::NotPositiveDefinite { what: "R".into() })?;
        let horizon = prior.len();
        let noise_cov = match noise_cov.len() {
            0 => vec![DMatrix::zeros(n, n); horizon],
            1 => vec![noise_cov[0].clone(); horizon],
            k if k == horizon => noise_cov,
            k => return Err(Error::Dimension(format!("{k} noise covariances for horizon {horizon}"))),
        };
        let noise_cov = noise_cov
            .iter()
            .map(|s| {
                if s.nrows() != n {
                    return Err(Error::Dimension("process noise covariance dimension".into()));
                }
                checked_psd(s, PSD_TOL, "process noise covariance")
            })
            .collect::<Result<Vec<_>>>()?;
        let noise_sqrt = noise_cov.iter().map(psd_sqrt).collect();
        Ok(Self { a, b, q, r, q_f, noise_cov, noise_sqrt, prior })
    }

    pub fn horizon(&self) -> usize {
        self.prior.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn prior(&self) -> &[Gaussian] {
        &self.prior
    }

    pub fn noise_cov(&self, t: usize) -> &DMatrix<f64> {
        &self.noise_cov[t]
    }

    pub fn with_prior(&self, prior: Vec<Gaussian>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.q.clone(),
            self.r.clone(),
            self.q_f.clone(),
            self.noise_cov.clone(),
            prior,
        )
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.q * x)) + u.dot(&(&self.r * u)))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_f * x))
    }
}

/// Finite-horizon LQR: `u_t = K_t x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub gains: Vec<DMatrix<f64>>,
    /// `P_0 … P_{t_f}`.
    pub p: Vec<DMatrix<f64>>,
}

/// Riccati recursion `K = −(R + BᵀPB)⁻¹BᵀPA`, `P ← Q + AᵀPA + AᵀPBK`.
pub fn lqr_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
    horizon: usize,
) -> Result<LqrSolution> {
    let mut p = q_f.clone();
    let mut gains = vec![DMatrix::zeros(b.ncols(), a.nrows()); horizon];
    let mut ps = vec![DMatrix::zeros(0, 0); horizon + 1];
    ps[horizon] = p.clone();
    for t in (0..horizon).rev() {
        let s = symmetrize(&(r + b.transpose() * &p * b));
        let chol = Cholesky::new(s.clone()).ok_or(Error::IllConditioned { step: t, condition: condition_number(&s) })?;
        let k = -chol.solve(&(b.transpose() * &p * a));
        p = symmetrize(&(q + a.transpose() * &p * a + a.transpose() * &p * b * &k));
        gains[t] = k;
        ps[t] = p.clone();
    }
    Ok(LqrSolution { gains, p: ps })
}

pub fn lqr_reference(problem: &LqgProblem) -> Result<LqrSolution> {
    lqr_gains(&problem.a, &problem.b, &problem.q, &problem.r, &problem.q_f, problem.horizon())
}

/// Input prior obtained by pushing the initial distribution through the LQR
/// closed loop: `Ū_t = N(K_t x̄_t, K_t Σ_t K_tᵀ + ridge·I)`.
pub fn lqr_projected_prior(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    lqr: &LqrSolution,
    initial: &Gaussian,
    noise_cov: Option<&DMatrix<f64>>,
    ridge: f64,
) -> Result<Vec<Gaussian>> {
    let m = b.ncols();
    let mut mean = initial.mean().clone();
    let mut cov = initial.cov().clone();
    let mut out = Vec::with_capacity(lqr.gains.len());
    for k in &lqr.gains {
        let pc = symmetrize(&(k * &cov * k.transpose())) + DMatrix::identity(m, m) * ridge;
        out.push(Gaussian::new(k * &mean, pc)?);
        let acl = a + b * k;
        mean = &acl * mean;
        cov = symmetrize(&(&acl * cov * acl.transpose()));
        if let Some(s) = noise_cov {
            cov += s;
        }
    }
    Ok(out)
}

/// One step `u_t = K_t x + η`, `η ~ N(η̄_t, Σ_η,t)`.
#[derive(Debug, Clone)]
pub struct BrLqgStep {
    pub k: DMatrix<f64>,
    pub eta_mean: DVector<f64>,
    pub eta: Gaussian,
}

impl BrLqgStep {
    pub fn eta_cov(&self) -> &DMatrix<f64> {
        self.eta.cov()
    }
}

#[derive(Debug, Clone)]
pub struct BrLqgPolicy {
    pub beta: f64,
    pub steps: Vec<BrLqgStep>,
    /// `P_0 … P_{t_f}`.
    pub p: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub d: Vec<f64>,
}

/// Backward recursion from `P_{t_f} = Q_f`, `b_{t_f} = 0`, `d_{t_f} = 0`:
///
/// ```text
/// S    = R + BᵀPB
/// Σ_η⁻¹ = βS + Σ_ū⁻¹
/// η̄    = Σ_η (Σ_ū⁻¹ ū̄ − β Bᵀb)
/// K    = −β Σ_η BᵀPA
/// P_t  = Q + KᵀRK + (A+BK)ᵀP(A+BK)
/// b_t  = KᵀRη̄ + (A+BK)ᵀ(PBη̄ + b)
/// d_t  = d + ½η̄ᵀSη̄ + bᵀBη̄ + ½tr(Σ_η S) + ½tr(Σ_ε P)
/// ```
pub fn solve_br_lqg(problem: &LqgProblem, beta: f64) -> Result<BrLqgPolicy> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive and finite, got {beta}")));
    }
    let (a, bm, r) = (&problem.a, &problem.b, &problem.r);
    let n = problem.state_dim();
    let horizon = problem.horizon();
    let mut p = problem.q_f.clone();
    let mut b = DVector::zeros(n);
    let mut d = 0.0;
    let mut ps = vec![p.clone()];
    let mut bs = vec![b.clone()];
    let mut ds = vec![d];
    let mut steps = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let prior = &problem.prior[t];
        let s = symmetrize(&(r + bm.transpose() * &p * bm));
        let prec = symmetrize(&(&s * beta + prior.precision()));
        let chol: Cholesky<f64, Dyn> =
            Cholesky::new(prec.clone()).ok_or(Error::IllConditioned { step: t, condition: condition_number(&prec) })?;
        let eta_cov = symmetrize(&chol.inverse());
        let eta_mean = chol.solve(&(prior.solve(prior.mean()) - bm.transpose() * &b * beta));
        let k = -chol.solve(&(bm.transpose() * &p * a)) * beta;
        let acl = a + bm * &k;
        let pb_eta = &p * bm * &eta_mean;
        let d_new = d
            + 0.5 * eta_mean.dot(&(&s * &eta_mean))
            + b.dot(&(bm * &eta_mean))
            + 0.5 * (&eta_cov * &s).trace()
            + 0.5 * (problem.noise_cov(t) * &p).trace();
        let b_new = k.transpose() * r * &eta_mean + acl.transpose() * (pb_eta + &b);
        let p_new = symmetrize(&(&problem.q + k.transpose() * r * &k + acl.transpose() * &p * &acl));
        let eta = Gaussian::new(eta_mean.clone(), eta_cov).map_err(|_| Error::IllConditioned {
            step: t,
            condition: condition_number(&prec),
        })?;
        steps.push(BrLqgStep { k, eta_mean, eta });
        p = p_new;
        b = b_new;
        d = d_new;
        ps.push(p.clone());
        bs.push(b.clone());
        ds.push(d);
    }
    steps.reverse();
    ps.reverse();
    bs.reverse();
    ds.reverse();
    Ok(BrLqgPolicy { beta, steps, p: ps, b: bs, d: ds })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl BrLqgPolicy {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `V_t(x) = ½xᵀP_t x + b_tᵀx + d_t`.
    pub fn value(&self, t: usize, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p[t] * x)) + self.b[t].dot(x) + self.d[t]
    }

    /// `E[V_t(X)]` for `X ~ dist`.
    pub fn expected_value(&self, t: usize, dist: &Gaussian) -> f64 {
        0.5 * (&self.p[t] * dist.cov()).trace() + self.value(t, dist.mean())
    }

    /// The Gaussian `U_t(x) = N(K_t x + η̄_t, Σ_η,t)`.
    pub fn action_distribution(&self, t: usize, x: &DVector<f64>) -> Result<Gaussian> {
        let st = &self.steps[t];
        Gaussian::new(&st.k * x + &st.eta_mean, st.eta_cov().clone())
    }

    pub fn mean_action(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        let st = &self.steps[t];
        &st.k * x + &st.eta_mean
    }

    pub fn log_density(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let st = &self.steps[t];
        st.eta.log_density(&(u - &st.k * x))
    }

    /// JSON with per-step arrays `K`, `eta_mean`, `eta_cov`, `P`, `b`, `d` and
    /// `beta`; matrices are row-major nested arrays.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "beta": self.beta,
            "K": self.steps.iter().map(|s| rows(&s.k)).collect::<Vec<_>>(),
            "eta_mean": self.steps.iter().map(|s| s.eta_mean.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "eta_cov": self.steps.iter().map(|s| rows(s.eta_cov())).collect::<Vec<_>>(),
            "P": self.p.iter().map(rows).collect::<Vec<_>>(),
            "b": self.b.iter().map(|v| v.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "d": self.d,
        })
    }
}

/// `K_t x + η` with Cholesky sampling of `η`.
pub fn policy_sample(policy: &BrLqgPolicy, t: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
    let st = &policy.steps[t];
    &st.k * x + st.eta.sample(rng)
}

impl StepPolicy for BrLqgPolicy {
    fn sample(&self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(policy_sample(self, t, estimate, rng))
    }
}

/// The `β = ∞` controller.
#[derive(Debug, Clone)]
pub struct LqrPolicy {
    pub solution: LqrSolution,
}

impl StepPolicy for LqrPolicy {
    fn sample(&self, t: usize, estimate: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(&self.solution.gains[t] * estimate)
    }
}

/// `D[N(K_t x + η̄_t, Σ_η,t) ‖ Ū_t]`.
pub fn stepwise_kl(policy: &BrLqgPolicy, problem: &LqgProblem, x: &DVector<f64>, t: usize) -> Result<f64> {
    Ok(policy.action_distribution(t, x)?.kl_to(&problem.prior[t]))
}

/// Closed-form moments of the closed loop under a perfect estimator.
#[derive(Debug, Clone)]
pub struct ClosedLoopMoments {
    /// State marginals at `t = 0 … t_f`.
    pub states: Vec<Gaussian>,
    /// `E[Σ_t c_t]`.
    pub expected_cost: f64,
    /// `E[Σ_t D[U_t(X_t) ‖ Ū_t]]`, the relative entropy of the trajectory
    /// distribution to the prior trajectory distribution.
    pub trajectory_kl: f64,
}

fn psd_gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Gaussian> {
    let n = mean.len();
    // keep degenerate marginals representable
    let jitter = 1e-300_f64.max(1e-14 * cov.diagonal().amax());
    Gaussian::new(mean.clone(), cov.clone()).or_else(|_| Gaussian::new(mean, cov + DMatrix::identity(n, n) * jitter))
}

pub fn closed_loop_moments(policy: &BrLqgPolicy, problem: &LqgProblem, initial: &Gaussian) -> Result<ClosedLoopMoments> {
    let (a, b) = (&problem.a, &problem.b);
    let mut mean = initial.mean().clone();
    let mut cov = initial.cov().clone();
    let mut states = vec![initial.clone()];
    let mut cost = 0.0;
    let mut kl = 0.0;
    for (t, st) in policy.steps.iter().enumerate() {
        let prior = &problem.prior[t];
        let u_mean = &st.k * &mean + &st.eta_mean;
        let u_cov = &st.k * &cov * st.k.transpose() + st.eta_cov();
        cost += 0.5 * ((&problem.q * &cov).trace() + mean.dot(&(&problem.q * &mean)));
        cost += 0.5 * ((&problem.r * &u_cov).trace() + u_mean.dot(&(&problem.r * &u_mean)));
        // E over X of the Gaussian relative entropy: only the Mahalanobis term depends on X
        let kcov = &st.k * &cov * st.k.transpose();
        kl += st.eta.kl_to(prior) - 0.5 * prior.mahalanobis_sq(&st.eta_mean) + 0.5 * prior.mahalanobis_sq(&u_mean)
            + 0.5 * prior.solve_matrix(&kcov).trace();
        let acl = a + b * &st.k;
        mean = &acl * &mean + b * &st.eta_mean;
        cov = symmetrize(&(&acl * &cov * acl.transpose() + b * st.eta_cov() * b.transpose() + problem.noise_cov(t)));
        states.push(psd_gaussian(mean.clone(), cov.clone())?);
    }
    cost += 0.5 * ((&problem.q_f * &cov).trace() + mean.dot(&(&problem.q_f * &mean)));
    Ok(ClosedLoopMoments { states, expected_cost: cost, trajectory_kl: kl })
}

/// A linear system with the quadratic costs of `problem` and a Gaussian initial
/// distribution.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub problem: LqgProblem,
    pub initial: Gaussian,
}

impl ControlSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.problem.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.problem.input_dim()
    }

    fn horizon(&self) -> usize {
        self.problem.horizon()
    }

    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, noise: &mut dyn NoiseSource) -> DVector<f64> {
        let mut next = &self.problem.a * x + &self.problem.b * u;
        let l = &self.problem.noise_sqrt[t];
        if l.iter().any(|v| *v != 0.0) {
            let z = DVector::from_fn(l.ncols(), |_, _| noise.standard_normal());
            next += l * z;
        }
        next
    }

    fn stage_cost(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.problem.stage_cost(x, u)
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.problem.terminal_cost(x)
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.initial.sample(rng)
    }
}

impl DifferentiableSystem for LinearSystem {
    fn stage_cost_grad(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.problem.q * x, &self.problem.r * u)
    }

    fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.problem.q_f * x
    }

    fn step_vjp(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.problem.a.tr_mul(lambda), self.problem.b.tr_mul(lambda))
    }
}

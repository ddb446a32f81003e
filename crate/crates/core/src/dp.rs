//! Metric differential privacy of Gibbs controllers and the robustness bound
//!
//! ```text
//! ΔJ ≤ β⁻¹ E[exp(ρ_β(X, X̂) + D[T^β ‖ T̄])],   ρ_β = Σ_t 2β l_t ρ(x_t, x̂_t)
//! ```
//!
//! which holds with probability `1 − γ`, `γ = Σ_t γ_t`.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::QuadraticHamiltonian;
use crate::lqg::{stepwise_kl, BrLqgPolicy, LqgProblem, LqrPolicy};
use crate::rng::TrialStreams;
use crate::system::{mean_std, rollout, ControlSystem, CostSummary, Estimator, Feedback, Policy, Trajectory};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;
/// One-sided 95% normal quantile.
pub const Z95_ONE_SIDED: f64 = 1.6448536269514722;

/// Per-sample exponents above this mark the bound as infinite.
pub const LOG_OVERFLOW: f64 = 690.7755278982137; // ln(1e300)

pub trait StateMetric: Sync {
    fn evaluate(&self, x: &DVector<f64>, x_hat: &DVector<f64>) -> f64;
}

/// `ρ(x, x̂) = ½‖xxᵀ − x̂x̂ᵀ‖_F + ‖x − x̂‖₂`.
pub fn rho_quadratic(x: &DVector<f64>, x_hat: &DVector<f64>) -> f64 {
    let outer = x * x.transpose() - x_hat * x_hat.transpose();
    0.5 * outer.norm() + (x - x_hat).norm()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticMetric;

impl StateMetric for QuadraticMetric {
    fn evaluate(&self, x: &DVector<f64>, x_hat: &DVector<f64>) -> f64 {
        rho_quadratic(x, x_hat)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EuclideanMetric;

impl StateMetric for EuclideanMetric {
    fn evaluate(&self, x: &DVector<f64>, x_hat: &DVector<f64>) -> f64 {
        (x - x_hat).norm()
    }
}

/// Per-step Hamiltonian `H_t(x,u) = c_t(x,u) + E[V_{t+1}(Ax + Bu + ε)]` of
/// the BR-LQG recursion, dropping terms constant in `(x, u)`.
pub fn lqg_step_hamiltonian(problem: &LqgProblem, policy: &BrLqgPolicy, t: usize) -> QuadraticHamiltonian {
    let p = &policy.p[t + 1];
    let b_next = &policy.b[t + 1];
    let (a, b) = (&problem.a, &problem.b);
    QuadraticHamiltonian {
        uu: &problem.r + b.transpose() * p * b,
        ux: b.transpose() * p * a,
        u: b.tr_mul(b_next),
        xx: &problem.q + a.transpose() * p * a,
        x: a.tr_mul(b_next),
        c: 0.0,
    }
}

/// ρ-Lipschitz constant of `x ↦ H(x,u)` for quadratic `H`:
///
/// ```text
/// |H(x,u) − H(x̂,u)| ≤ ½‖W‖_F ‖xxᵀ − x̂x̂ᵀ‖_F + ‖Gᵀu + w‖ ‖x − x̂‖ ≤ max(‖W‖_F, ‖Gᵀu + w‖) ρ(x, x̂)
/// ```
///
/// The bound holds on all of the state space, so it is valid on every region.
pub fn lipschitz_level_quadratic(h: &QuadraticHamiltonian, u: &DVector<f64>) -> f64 {
    symmetric_part(&h.xx).norm().max(h.state_gradient_coefficient(u).norm())
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest observed `|H(x,u) − H(x̂,u)| / ρ(x, x̂)`; a lower estimate.
    pub level: f64,
    pub n_candidates: usize,
    pub n_pairs_used: usize,
    pub region_radius: f64,
}

/// Sampled lower estimate of the ρ-Lipschitz constant of `x ↦ H(x,u)` on the
/// ρ-ball of radius `region_radius` around `center`.
///
/// Candidate pairs are `center + scale·z` with standard normal `z`, drawn from
/// `rng` in a fixed order; pairs with a point outside the ball are skipped, so
/// the accepted sets are nested in both `n_candidates` and `region_radius`.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_level_sampled<H>(
    h: H,
    u: &DVector<f64>,
    center: &DVector<f64>,
    metric: &dyn StateMetric,
    region_radius: f64,
    scale: f64,
    n_candidates: usize,
    rng: &mut dyn RngCore,
) -> LipschitzEstimate
where
    H: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let n = center.len();
    let mut level: f64 = 0.0;
    let mut used = 0;
    for _ in 0..n_candidates {
        let x = center + crate::gaussian::standard_normal(rng, n) * scale;
        let y = center + crate::gaussian::standard_normal(rng, n) * scale;
        if metric.evaluate(&x, center) > region_radius || metric.evaluate(&y, center) > region_radius {
            continue;
        }
        let d = metric.evaluate(&x, &y);
        if d > 0.0 {
            level = level.max((h(&x, u) - h(&y, u)).abs() / d);
            used += 1;
        }
    }
    LipschitzEstimate { level, n_candidates, n_pairs_used: used, region_radius }
}

/// One summand `2 β l ρ(x_t, x̂_t)` of a privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetTerm {
    pub step: usize,
    pub beta: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpCertificate {
    pub terms: Vec<BudgetTerm>,
    /// In `[0, 1]`; `1` is vacuous.
    pub gamma: f64,
    pub gamma_ci95: f64,
    /// Radius of the ρ-ball on which the levels are certified.
    pub region_radius: f64,
}

impl DpCertificate {
    /// Budget `Σ_t 2βl_t ρ` over steps `0 … levels.len()−1`.
    pub fn new(beta: f64, levels: &[f64], gamma: f64, gamma_ci95: f64, region_radius: f64) -> Self {
        let terms = levels.iter().enumerate().map(|(step, &level)| BudgetTerm { step, beta, level }).collect();
        Self { terms, gamma: gamma.clamp(0.0, 1.0), gamma_ci95, region_radius }
    }

    /// The identity for [`compose_budgets`].
    pub fn zero() -> Self {
        Self { terms: vec![], gamma: 0.0, gamma_ci95: 0.0, region_radius: f64::INFINITY }
    }

    pub fn is_vacuous(&self) -> bool {
        self.gamma >= 1.0
    }

    /// `ρ_β(x_{0:t_f}, x̂_{0:t_f})`; steps beyond the supplied paths are skipped.
    pub fn budget(&self, metric: &dyn StateMetric, states: &[DVector<f64>], estimates: &[DVector<f64>]) -> f64 {
        self.terms
            .iter()
            .filter(|term| term.step < states.len() && term.step < estimates.len())
            .map(|term| 2.0 * term.beta * term.level * metric.evaluate(&states[term.step], &estimates[term.step]))
            .sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("certificate serializes")
    }
}

/// Pointwise sum of budgets; `γ` adds and is clipped to 1.
pub fn compose_budgets(certs: &[DpCertificate]) -> DpCertificate {
    let mut out = DpCertificate::zero();
    let mut gamma = 0.0;
    let mut ci2 = 0.0;
    for c in certs {
        out.terms.extend(c.terms.iter().copied());
        gamma += c.gamma;
        ci2 += c.gamma_ci95 * c.gamma_ci95;
        out.region_radius = out.region_radius.min(c.region_radius);
    }
    out.gamma = gamma.min(1.0);
    out.gamma_ci95 = ci2.sqrt();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    /// `Σ_t γ_t` clipped to `[0, 1]`.
    pub gamma: f64,
    pub gamma_ci95: f64,
    pub gamma_unclipped: f64,
    pub per_step: Vec<f64>,
    pub per_step_ci95: Vec<f64>,
    /// Fraction of sampled inputs inside `U_t(l_t)`.
    pub coverage: f64,
    pub n_samples: usize,
}

pub const MIN_GAMMA_SAMPLES: usize = 30;

/// `γ_t = 1 − E[1{U_t ∈ U_t(l_t)} exp(−2βl_t ρ(X_t, X̂_t))]` over offline rollouts.
///
/// `level_of(t, u)` is the Lipschitz level of `x ↦ H_t(x, u)`; `u ∈ U_t(l)`
/// iff `level_of(t, u) < l`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gamma(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    estimator: &dyn Estimator,
    metric: &dyn StateMetric,
    level_of: &(dyn Fn(usize, &DVector<f64>) -> f64 + Sync),
    beta: f64,
    levels: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<GammaEstimate> {
    if n_samples < MIN_GAMMA_SAMPLES {
        return Err(Error::TooFewSamples { got: n_samples, min: MIN_GAMMA_SAMPLES });
    }
    if levels.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidParameter("Lipschitz levels must be positive".into()));
    }
    let horizon = levels.len().min(system.horizon());
    let per_trial: Vec<(Vec<f64>, usize)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut streams = TrialStreams::new(seed, i);
            let mut ctl = policy.controller();
            let tr = rollout(system, ctl.as_mut(), estimator, Feedback::Offline, &mut streams)?;
            let mut covered = 0;
            let misses = (0..horizon)
                .map(|t| {
                    let inside = level_of(t, &tr.inputs[t]) < levels[t];
                    covered += inside as usize;
                    if inside {
                        1.0 - (-2.0 * beta * levels[t] * metric.evaluate(&tr.states[t], &tr.estimates[t])).exp()
                    } else {
                        1.0
                    }
                })
                .collect();
            Ok((misses, covered))
        })
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let mut per_step = Vec::with_capacity(horizon);
    let mut per_step_ci95 = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let col: Vec<f64> = per_trial.iter().map(|(m, _)| m[t]).collect();
        let (m, s) = mean_std(&col);
        per_step.push(m);
        per_step_ci95.push(Z95 * s / n.sqrt());
    }
    let sums: Vec<f64> = per_trial.iter().map(|(m, _)| m.iter().sum()).collect();
    let (total, sd) = mean_std(&sums);
    let covered: usize = per_trial.iter().map(|(_, c)| c).sum();
    Ok(GammaEstimate {
        gamma: total.clamp(0.0, 1.0),
        gamma_ci95: Z95 * sd / n.sqrt(),
        gamma_unclipped: total,
        per_step,
        per_step_ci95,
        coverage: covered as f64 / (n * horizon.max(1) as f64),
        n_samples,
    })
}

/// Levels `l_t` set to the `quantile` of `level_of(t, U_t)` over offline rollouts.
pub fn pilot_levels(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    level_of: &(dyn Fn(usize, &DVector<f64>) -> f64 + Sync),
    quantile: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let trajs = offline_trajectories(system, policy, n_samples, seed)?;
    Ok((0..system.horizon())
        .map(|t| {
            let v: Vec<f64> = trajs.iter().map(|tr| level_of(t, &tr.inputs[t])).collect();
            // strict membership test: nudge above the quantile sample
            empirical_quantile(&v, quantile) * (1.0 + 1e-12) + f64::MIN_POSITIVE
        })
        .collect())
}

/// The `q` quantile of observed `ρ(x_t, x̂_t)` over all steps of offline rollouts.
pub fn rho_quantile(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    estimator: &dyn Estimator,
    metric: &dyn StateMetric,
    q: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let rhos: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut ctl = policy.controller();
            let tr = rollout(system, ctl.as_mut(), estimator, Feedback::Offline, &mut TrialStreams::new(seed, i))?;
            Ok(tr.estimates.iter().zip(&tr.states).map(|(xh, x)| metric.evaluate(x, xh)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(empirical_quantile(&rhos, q))
}

fn offline_trajectories(system: &dyn ControlSystem, policy: &dyn Policy, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut ctl = policy.controller();
            rollout(system, ctl.as_mut(), &crate::system::PerfectEstimator, Feedback::Offline, &mut TrialStreams::new(seed, i))
        })
        .collect()
}

/// Nearest-rank quantile (`q ∈ [0,1]`); NaN for an empty sample.
pub fn empirical_quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// A stochastic controller whose per-step density can be evaluated.
pub trait DensityPolicy: Sync {
    fn log_density(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;
    fn sample_at(&self, t: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

impl DensityPolicy for BrLqgPolicy {
    fn log_density(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        Ok(BrLqgPolicy::log_density(self, t, x, u))
    }

    fn sample_at(&self, t: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(crate::lqg::policy_sample(self, t, x, rng))
    }
}

impl DensityPolicy for LqrPolicy {
    fn log_density(&self, _t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<f64> {
        Err(Error::UnsupportedPolicy)
    }

    fn sample_at(&self, _t: usize, _x: &DVector<f64>, _rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Err(Error::UnsupportedPolicy)
    }
}

/// One audited substitution: true and estimated states at a set of steps,
/// released by independent mechanisms (composition).
#[derive(Debug, Clone, PartialEq)]
pub struct AuditPoint {
    pub steps: Vec<(usize, DVector<f64>, DVector<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_triples: usize,
    /// Triples whose inputs all lie in `U_t(l_t)`.
    pub n_in_set: usize,
    pub n_violations: usize,
    /// Violations among the in-set triples.
    pub violation_fraction: f64,
    pub violation_ci95: f64,
    /// `max(log-ratio − budget)` over in-set triples; ≤ 0 means no violation.
    pub worst_slack: f64,
}

/// Checks `Σ log U_t(x_t){u_t} − log U_t(x̂_t){u_t} ≤ Σ 2βl_t ρ(x_t, x̂_t)` for
/// inputs `u_t ~ U_t(x_t)` restricted to `U_t(l_t)`, `n_inputs` per point.
#[allow(clippy::too_many_arguments)]
pub fn empirical_dp_audit(
    policy: &dyn DensityPolicy,
    points: &[AuditPoint],
    metric: &dyn StateMetric,
    level_of: &(dyn Fn(usize, &DVector<f64>) -> f64 + Sync),
    beta: f64,
    levels: &[f64],
    n_inputs: usize,
    rng: &mut dyn RngCore,
) -> Result<AuditReport> {
    let mut n_triples = 0;
    let mut n_in = 0;
    let mut n_viol = 0;
    let mut worst = f64::NEG_INFINITY;
    for point in points {
        for _ in 0..n_inputs {
            n_triples += 1;
            let mut inside = true;
            let mut log_ratio = 0.0;
            let mut budget = 0.0;
            for (t, x, x_hat) in &point.steps {
                let u = policy.sample_at(*t, x, rng)?;
                inside &= level_of(*t, &u) < levels[*t];
                log_ratio += policy.log_density(*t, x, &u)? - policy.log_density(*t, x_hat, &u)?;
                budget += 2.0 * beta * levels[*t] * metric.evaluate(x, x_hat);
            }
            if !inside {
                continue;
            }
            n_in += 1;
            let slack = log_ratio - budget;
            worst = worst.max(slack);
            if slack > 0.0 {
                n_viol += 1;
            }
        }
    }
    let frac = if n_in == 0 { 0.0 } else { n_viol as f64 / n_in as f64 };
    let ci = if n_in == 0 { 1.0 } else { Z95 * (frac * (1.0 - frac) / n_in as f64).sqrt() };
    Ok(AuditReport { n_triples, n_in_set: n_in, n_violations: n_viol, violation_fraction: frac, violation_ci95: ci, worst_slack: worst })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub beta: f64,
    pub j_off: CostSummary,
    pub j_on: CostSummary,
    pub delta_j: f64,
    pub delta_j_ci95: f64,
    /// `+∞` when a sample overflowed.
    pub bound: f64,
    pub bound_ci95: f64,
    /// `log` of the bound; finite even when `bound` overflows.
    pub log_bound: f64,
    pub gamma: f64,
    pub gamma_ci95: f64,
    /// `E[D[T^β ‖ T̄]]` over the offline rollouts.
    pub kl_term: f64,
    pub kl_term_ci95: f64,
    /// `E[ρ_β]` over the offline rollouts.
    pub budget_mean: f64,
    pub n_samples: usize,
    /// Trial index and exponent of the largest per-sample exponent.
    pub dominating_sample: (usize, f64),
    /// One-sided test at 95%: the data do not show `ΔJ > bound`.
    pub bound_holds: bool,
}

impl RobustnessReport {
    pub fn to_json(&self) -> serde_json::Value {
        let f = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::Value::Null };
        serde_json::json!({
            "beta": self.beta,
            "j_off": {"mean": f(self.j_off.mean), "std": f(self.j_off.std), "n_trials": self.j_off.n_trials},
            "j_on": {"mean": f(self.j_on.mean), "std": f(self.j_on.std), "n_trials": self.j_on.n_trials},
            "delta_j": f(self.delta_j),
            "delta_j_ci95": f(self.delta_j_ci95),
            "bound": f(self.bound),
            "bound_ci95": f(self.bound_ci95),
            "log_bound": f(self.log_bound),
            "gamma": self.gamma,
            "gamma_ci95": self.gamma_ci95,
            "kl_term": f(self.kl_term),
            "kl_term_ci95": f(self.kl_term_ci95),
            "budget_mean": f(self.budget_mean),
            "n_samples": self.n_samples,
            "bound_holds": self.bound_holds,
        })
    }
}

/// Evaluates the bound over offline rollouts (the estimator is sampled only to
/// measure ρ) and measures `ΔJ = J_on − J_off` on paired online/offline
/// rollouts with identical streams.
///
/// `kl_of(trajectory)` returns the trajectory relative entropy term for one
/// offline rollout, e.g. the sum of step-wise Gaussian divergences.
#[allow(clippy::too_many_arguments)]
pub fn robustness_bound(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    estimator: &dyn Estimator,
    metric: &dyn StateMetric,
    cert: &DpCertificate,
    kl_of: &(dyn Fn(&Trajectory) -> Result<f64> + Sync),
    beta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    if n_samples < 2 {
        return Err(Error::TooFewSamples { got: n_samples, min: 2 });
    }
    let rows: Vec<(f64, f64, f64, f64)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut ctl = policy.controller();
            let off = rollout(system, ctl.as_mut(), estimator, Feedback::Offline, &mut TrialStreams::new(seed, i));
            let mut ctl = policy.controller();
            let on = rollout(system, ctl.as_mut(), estimator, Feedback::Online, &mut TrialStreams::new(seed, i));
            let cost = |r: &Result<Trajectory>| match r {
                Ok(tr) => Ok(tr.total_cost),
                Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e.clone()),
            };
            let (c_off, c_on) = (cost(&off)?, cost(&on)?);
            let (budget, kl) = match &off {
                Ok(tr) => (cert.budget(metric, &tr.states, &tr.estimates), kl_of(tr)?),
                Err(_) => (f64::INFINITY, f64::INFINITY),
            };
            Ok((c_off, c_on, budget, kl))
        })
        .collect::<Result<_>>()?;
    let n = n_samples as f64;
    let off: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let on: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (delta_j, se_d, _) = crate::system::paired_difference(&on, &off);
    let exps: Vec<f64> = rows.iter().map(|r| r.2 + r.3).collect();
    let (dom_idx, dom) = exps
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let log_mean = crate::gibbs::log_sum_exp(&exps) - n.ln();
    let log_bound = log_mean - beta.ln();
    let (bound, bound_ci95) = if dom > LOG_OVERFLOW {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let vals: Vec<f64> = exps.iter().map(|e| e.exp()).collect();
        let (m, s) = mean_std(&vals);
        (m / beta, Z95 * s / n.sqrt() / beta)
    };
    let kls: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let (kl_term, kl_sd) = mean_std(&kls);
    let budgets: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (budget_mean, _) = mean_std(&budgets);
    let se_b = bound_ci95 / Z95;
    let bound_holds = !bound.is_finite() || delta_j - bound <= Z95_ONE_SIDED * (se_d * se_d + se_b * se_b).sqrt();
    Ok(RobustnessReport {
        beta,
        j_off: CostSummary::from_costs(&off),
        j_on: CostSummary::from_costs(&on),
        delta_j,
        delta_j_ci95: Z95 * se_d,
        bound,
        bound_ci95,
        log_bound,
        gamma: cert.gamma,
        gamma_ci95: cert.gamma_ci95,
        kl_term,
        kl_term_ci95: Z95 * kl_sd / n.sqrt(),
        budget_mean,
        n_samples,
        dominating_sample: (dom_idx, dom),
        bound_holds,
    })
}

/// `Σ_t D[U_t(x_t) ‖ Ū_t]` along a rollout's true states.
pub fn lqg_trajectory_kl(policy: &BrLqgPolicy, problem: &LqgProblem, tr: &Trajectory) -> Result<f64> {
    (0..policy.horizon()).map(|t| stepwise_kl(policy, problem, &tr.states[t], t)).sum()
}

/// Grid argmin of `objective(β)`, ties toward the smaller β. Non-finite values
/// are skipped.
pub fn optimize_beta<F>(grid: &[f64], mut objective: F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for beta in sorted {
        let v = objective(beta)?;
        if !v.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((beta, v));
        }
    }
    best.ok_or(Error::AllBoundsInfinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::gibbs::FiniteGibbs;
    use crate::lqg::{solve_br_lqg, LinearSystem};
    use crate::system::PerfectEstimator;
    use crate::systems::{gaussian_estimator, linear_quadrotor_system, quadrotor_initial_distribution, QuadraticCost, QuadrotorParams};
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rho_examples() {
        let x = dvector![1.0, 0.0];
        assert_eq!(rho_quadratic(&x, &x), 0.0);
        assert!((rho_quadratic(&x, &dvector![0.0, 0.0]) - 1.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rho_symmetric_nonnegative(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let (x, y) = (DVector::from_vec(a), DVector::from_vec(b));
            let r = rho_quadratic(&x, &y);
            prop_assert!(r >= 0.0);
            prop_assert!((r - rho_quadratic(&y, &x)).abs() <= 1e-12);
        }

        #[test]
        fn quadratic_level_bounds_differences(
            w in proptest::collection::vec(-2.0f64..2.0, 9),
            g in proptest::collection::vec(-2.0f64..2.0, 6),
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            u in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let h = QuadraticHamiltonian {
                uu: DMatrix::identity(2, 2),
                ux: DMatrix::from_vec(2, 3, g),
                u: DVector::zeros(2),
                xx: DMatrix::from_vec(3, 3, w),
                x: dvector![0.1, -0.2, 0.3],
                c: 1.0,
            };
            let u = DVector::from_vec(u);
            let (x, y) = (DVector::from_vec(a), DVector::from_vec(b));
            let l = lipschitz_level_quadratic(&h, &u);
            let diff = (h.evaluate(&x, &u) - h.evaluate(&y, &u)).abs();
            prop_assert!(diff <= l * rho_quadratic(&x, &y) + 1e-10);
        }

        #[test]
        fn budget_is_additive_under_composition(l1 in 0.01f64..10.0, l2 in 0.01f64..10.0, beta in 0.01f64..10.0, s in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let c1 = DpCertificate { terms: vec![BudgetTerm { step: 0, beta, level: l1 }], gamma: 0.1, gamma_ci95: 0.01, region_radius: 1.0 };
            let c2 = DpCertificate { terms: vec![BudgetTerm { step: 1, beta, level: l2 }], gamma: 0.2, gamma_ci95: 0.01, region_radius: 2.0 };
            let xs = vec![dvector![s[0], s[1]], dvector![s[2], s[3]]];
            let xh = vec![dvector![0.0, 0.0], dvector![0.1, 0.0]];
            let composed = compose_budgets(&[c1.clone(), c2.clone()]);
            let m = QuadraticMetric;
            let direct = 2.0 * beta * (l1 * rho_quadratic(&xs[0], &xh[0]) + l2 * rho_quadratic(&xs[1], &xh[1]));
            prop_assert!((composed.budget(&m, &xs, &xh) - direct).abs() <= 1e-12 * (1.0 + direct));
            prop_assert!((composed.budget(&m, &xs, &xh) - c1.budget(&m, &xs, &xh) - c2.budget(&m, &xs, &xh)).abs() <= 1e-12 * (1.0 + direct));
            prop_assert!((composed.gamma - 0.3).abs() < 1e-15);
            prop_assert_eq!(composed.budget(&m, &xs, &xs), 0.0);
        }
    }

    #[test]
    fn zero_certificate_is_identity() {
        let c = DpCertificate::new(2.0, &[1.0, 3.0], 0.2, 0.01, 1.0);
        let composed = compose_budgets(&[c.clone(), DpCertificate::zero()]);
        assert_eq!(composed.terms, c.terms);
        assert_eq!(composed.gamma, c.gamma);
        let xs = vec![dvector![1.0], dvector![2.0]];
        let xh = vec![dvector![0.5], dvector![2.5]];
        assert_eq!(composed.budget(&QuadraticMetric, &xs, &xh), c.budget(&QuadraticMetric, &xs, &xh));
        assert_eq!(compose_budgets(&[c.clone(), c.clone(), c.clone(), c.clone(), c.clone(), c]).gamma, 1.0);
    }

    #[test]
    fn constant_hamiltonian_has_zero_level() {
        let h = QuadraticHamiltonian::input_only(DMatrix::identity(2, 2), dvector![1.0, 0.0], 3);
        assert_eq!(lipschitz_level_quadratic(&h, &dvector![0.3, 0.2]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = lipschitz_level_sampled(|x, u| h.evaluate(x, u), &dvector![0.3, 0.2], &DVector::zeros(3), &QuadraticMetric, 1.0, 0.3, 200, &mut rng);
        assert_eq!(est.level, 0.0);
    }

    #[test]
    fn sampled_level_respects_trace_cap_and_is_nested() {
        // H = xᵀx: |xᵀx − x̂ᵀx̂| ≤ √n ‖xxᵀ − x̂x̂ᵀ‖_F ≤ 2√n ρ
        let n = 3;
        let h = |x: &DVector<f64>, _: &DVector<f64>| x.dot(x);
        let cap = 2.0 * (n as f64).sqrt();
        let center = DVector::from_element(n, 0.2);
        let u = dvector![0.0];
        let mut last = 0.0;
        for k in [10, 100, 1000, 4000] {
            let est = lipschitz_level_sampled(h, &u, &center, &QuadraticMetric, 2.0, 0.5, k, &mut ChaCha8Rng::seed_from_u64(4));
            assert!(est.level <= cap);
            assert!(est.level >= last);
            last = est.level;
        }
        let mut last = 0.0;
        for r in [0.1, 0.5, 1.0, 3.0] {
            let est = lipschitz_level_sampled(h, &u, &center, &QuadraticMetric, r, 0.5, 1000, &mut ChaCha8Rng::seed_from_u64(4));
            assert!(est.level >= last);
            last = est.level;
        }
    }

    fn quad() -> (LinearSystem, BrLqgPolicy) {
        let (sys, _) =
            linear_quadrotor_system(&QuadrotorParams::default(), &QuadraticCost::default(), quadrotor_initial_distribution(), 1e-6)
                .unwrap();
        let pol = solve_br_lqg(&sys.problem, 10.0).unwrap();
        (sys, pol)
    }

    #[test]
    fn gamma_zero_without_noise_at_full_coverage() {
        let (sys, pol) = quad();
        let levels = vec![1e6; sys.problem.horizon()];
        let est = gaussian_estimator(0.0, &crate::systems::quadrotor::ESTIMATOR_SCALING).unwrap();
        let level_of = |_: usize, _: &DVector<f64>| 0.0;
        let g = estimate_gamma(&sys, &pol, &est, &QuadraticMetric, &level_of, 10.0, &levels, 50, 1).unwrap();
        assert_eq!(g.gamma, 0.0);
        assert_eq!(g.coverage, 1.0);
        assert!(matches!(
            estimate_gamma(&sys, &pol, &est, &QuadraticMetric, &level_of, 10.0, &levels, 29, 1),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn gamma_grows_with_noise_and_beta() {
        let (sys, pol) = quad();
        let h: Vec<QuadraticHamiltonian> = (0..sys.problem.horizon()).map(|t| lqg_step_hamiltonian(&sys.problem, &pol, t)).collect();
        let level_of = move |t: usize, u: &DVector<f64>| lipschitz_level_quadratic(&h[t], u);
        let levels = pilot_levels(&sys, &pol, &level_of, 0.999, 200, 5).unwrap();
        let v = crate::systems::quadrotor::ESTIMATOR_SCALING;
        let g = |s2: f64, beta: f64| {
            estimate_gamma(&sys, &pol, &gaussian_estimator(s2, &v).unwrap(), &QuadraticMetric, &level_of, beta, &levels, 200, 9)
                .unwrap()
                .gamma_unclipped
        };
        let g0 = g(0.0, 1e-4);
        assert!(g0 <= g(0.01, 1e-4));
        assert!(g(0.01, 1e-5) <= g(0.01, 1e-4));
        assert!(g0 < 0.5);
    }

    #[test]
    fn identical_states_never_violate() {
        let (sys, pol) = quad();
        let x = quadrotor_initial_distribution().mean().clone();
        let points = vec![AuditPoint { steps: vec![(0, x.clone(), x)] }];
        let levels = vec![1e6; sys.problem.horizon()];
        let rep = empirical_dp_audit(&pol, &points, &QuadraticMetric, &|_, _| 0.0, 10.0, &levels, 100, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(rep.n_violations, 0);
        assert!(rep.worst_slack <= 0.0);
    }

    /// Finite-action Gibbs mechanism on a scalar state; inputs are indices.
    struct FiniteMechanism {
        costs: Vec<f64>,
        beta: f64,
    }

    impl FiniteMechanism {
        fn gibbs(&self) -> FiniteGibbs<impl Fn(&DVector<f64>, usize) -> f64 + '_> {
            FiniteGibbs::uniform(self.costs.len(), move |x: &DVector<f64>, i| self.costs[i] * x[0], self.beta).unwrap()
        }
    }

    impl DensityPolicy for FiniteMechanism {
        fn log_density(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
            self.gibbs().log_density(x, u[0] as usize)
        }

        fn sample_at(&self, _t: usize, x: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
            Ok(dvector![self.gibbs().sample(x, rng)? as f64])
        }
    }

    #[test]
    fn finite_gibbs_audit_at_true_lipschitz_constant() {
        // H(x, i) = c_i x is |c_i|-Lipschitz in the Euclidean metric
        let mech = FiniteMechanism { costs: vec![-1.0, 0.5, 2.0, 0.0], beta: 1.3 };
        let l = 2.0 + 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<AuditPoint> = (0..200)
            .map(|_| {
                let x = crate::gaussian::standard_normal(&mut rng, 1);
                let y = crate::gaussian::standard_normal(&mut rng, 1);
                AuditPoint { steps: vec![(0, x, y)] }
            })
            .collect();
        let rep = empirical_dp_audit(&mech, &points, &EuclideanMetric, &|_, u: &DVector<f64>| [1.0, 0.5, 2.0, 0.0][u[0] as usize], 1.3, &[l], 20, &mut rng)
            .unwrap();
        assert_eq!(rep.n_in_set, rep.n_triples);
        assert_eq!(rep.n_violations, 0);
    }

    #[test]
    fn lqr_has_no_density() {
        let lqr = LqrPolicy { solution: crate::lqg::lqr_reference(&quad().0.problem).unwrap() };
        let points = vec![AuditPoint { steps: vec![(0, dvector![0.0], dvector![0.0])] }];
        let err = empirical_dp_audit(&lqr, &points, &QuadraticMetric, &|_, _| 0.0, 1.0, &[1.0], 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(err.unwrap_err(), Error::UnsupportedPolicy);
    }

    #[test]
    fn prior_policy_with_perfect_estimator_has_unit_bound() {
        // Ū ≡ N(0, 1) and K = 0: ρ ≡ 0 and KL ≡ 0
        let prior = vec![Gaussian::isotropic(dvector![0.0], 1.0).unwrap(); 3];
        let one = DMatrix::from_element(1, 1, 1.0);
        let problem = LqgProblem::new(one.clone(), one.clone(), one.clone(), one.clone(), one, vec![], prior).unwrap();
        let sys = LinearSystem { problem: problem.clone(), initial: Gaussian::isotropic(dvector![0.5], 0.1).unwrap() };
        let pol = solve_br_lqg(&problem, 1e-12).unwrap();
        let cert = DpCertificate::new(1.0, &[1.0; 3], 0.0, 0.0, 1.0);
        let kl = |_: &Trajectory| Ok(0.0);
        let rep = robustness_bound(&sys, &pol, &PerfectEstimator, &QuadraticMetric, &cert, &kl, 1.0, 100, 2).unwrap();
        assert_eq!(rep.bound, 1.0);
        assert_eq!(rep.delta_j, 0.0);
        assert!(rep.bound_holds);
        let v = rep.to_json();
        assert!(v.get("bound_ci95").is_some() && v.get("delta_j_ci95").is_some());
    }

    #[test]
    fn overflow_gives_infinite_bound() {
        let (sys, pol) = quad();
        let cert = DpCertificate::new(1e6, &[1e6; 13], 0.9, 0.0, 1.0);
        let est = gaussian_estimator(0.4, &crate::systems::quadrotor::ESTIMATOR_SCALING).unwrap();
        let kl = |_: &Trajectory| Ok(0.0);
        let rep = robustness_bound(&sys, &pol, &est, &QuadraticMetric, &cert, &kl, 10.0, 20, 2).unwrap();
        assert_eq!(rep.bound, f64::INFINITY);
        assert!(rep.log_bound.is_finite());
        assert!(rep.dominating_sample.1 > LOG_OVERFLOW);
    }

    #[test]
    fn optimize_beta_tie_and_errors() {
        assert_eq!(optimize_beta(&[3.0, 1.0, 2.0], |_| Ok(5.0)).unwrap(), (1.0, 5.0));
        assert_eq!(optimize_beta(&[1.0, 2.0, 3.0], |b| Ok((b - 2.0).powi(2))).unwrap().0, 2.0);
        assert_eq!(optimize_beta(&[1.0, 2.0], |_| Ok(f64::INFINITY)).unwrap_err(), Error::AllBoundsInfinite);
    }

    #[test]
    fn quantile_nearest_rank() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&v, 0.5), 3.0);
        assert_eq!(empirical_quantile(&v, 1.0), 5.0);
    }
}

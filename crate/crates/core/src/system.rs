//! System abstraction, rollouts with estimation noise in the loop, and Monte
//! Carlo evaluation of the offline and online costs.

use std::io::Write;

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::TrialStreams;

/// Source of process noise handed to the dynamics.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;
}

/// Always returns zero; dynamics driven by it are deterministic.
pub struct NullNoise;

impl NoiseSource for NullNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

pub struct RngNoise<'a>(pub &'a mut dyn RngCore);

impl NoiseSource for RngNoise<'_> {
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut *self.0)
    }
}

/// A finite-horizon discrete-time control problem `(F_t, c_t, t_f, X_0)`.
///
/// Stage costs may return `f64::INFINITY` only for systems with an absorbing
/// failure set.
pub trait ControlSystem: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn step(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, noise: &mut dyn NoiseSource) -> DVector<f64>;
    fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>) -> f64;
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64>;
}

/// Gradients of a system with deterministic dynamics, for adjoint
/// (backpropagation-through-time) cost gradients.
pub trait DifferentiableSystem: ControlSystem {
    /// `(∂c_t/∂x, ∂c_t/∂u)`.
    fn stage_cost_grad(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
    fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `(λᵀ ∂F_t/∂x, λᵀ ∂F_t/∂u)` of the noise-free step.
    fn step_vjp(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

/// Noisy state channel `X̂(x)`.
pub trait Estimator: Sync {
    fn estimate(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;
    fn describe(&self) -> String {
        String::from("estimator")
    }
}

/// Returns the true state.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectEstimator;

impl Estimator for PerfectEstimator {
    fn estimate(&self, x: &DVector<f64>, _rng: &mut dyn RngCore) -> DVector<f64> {
        x.clone()
    }

    fn describe(&self) -> String {
        String::from("perfect")
    }
}

/// One episode's worth of (possibly stateful) feedback.
pub trait Controller {
    fn control(&mut self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

/// A per-step stochastic controller. Each rollout gets a fresh [`Controller`],
/// so receding-horizon controllers can keep their plan between steps.
pub trait Policy: Sync {
    fn controller(&self) -> Box<dyn Controller + '_>;
}

/// A memoryless mechanism `u ~ U_t(x̂)`.
pub trait StepPolicy: Sync {
    fn sample(&self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

struct Stateless<'a, P: ?Sized>(&'a P);

impl<P: StepPolicy + ?Sized> Controller for Stateless<'_, P> {
    fn control(&mut self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        self.0.sample(t, estimate, rng)
    }
}

impl<P: StepPolicy> Policy for P {
    fn controller(&self) -> Box<dyn Controller + '_> {
        Box::new(Stateless(self))
    }
}

/// Adapts a closure into a [`StepPolicy`].
pub struct FnPolicy<F>(pub F);

impl<F> FnPolicy<F>
where
    F: Fn(usize, &DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
{
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F> StepPolicy for FnPolicy<F>
where
    F: Fn(usize, &DVector<f64>, &mut dyn RngCore) -> Result<DVector<f64>> + Sync,
{
    fn sample(&self, t: usize, estimate: &DVector<f64>, rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        (self.0)(t, estimate, rng)
    }
}

/// Whether the controller sees the estimate (online) or the true state
/// (offline). Estimates are drawn and recorded in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feedback {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub total_cost: f64,
}

impl Trajectory {
    /// `c_0(x_0,u_0) + … + c_{t_f}(x_{t_f})` recomputed from the stored path.
    pub fn recompute_cost(&self, system: &dyn ControlSystem) -> f64 {
        let running: f64 = self
            .inputs
            .iter()
            .enumerate()
            .map(|(t, u)| system.stage_cost(t, &self.states[t], u))
            .sum();
        running + system.terminal_cost(self.states.last().expect("non-empty trajectory"))
    }

    pub fn is_failure(&self) -> bool {
        !self.total_cost.is_finite()
    }

    /// One JSON-lines record: `states`, `estimates`, `inputs`, `cost`.
    /// An infinite cost is written as `null`.
    pub fn to_json_line(&self) -> String {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>();
        let cost = if self.total_cost.is_finite() { Some(self.total_cost) } else { None };
        serde_json::json!({
            "states": rows(&self.states),
            "estimates": rows(&self.estimates),
            "inputs": rows(&self.inputs),
            "cost": cost,
        })
        .to_string()
    }
}

pub fn write_json_lines<W: Write>(mut out: W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for tr in trajectories {
        writeln!(out, "{}", tr.to_json_line())?;
    }
    Ok(())
}

/// Simulates one episode.
///
/// The estimate is drawn at every `t < t_f`, including `t = 0`; the terminal
/// state is not estimated.
pub fn rollout(
    system: &dyn ControlSystem,
    controller: &mut dyn Controller,
    estimator: &dyn Estimator,
    feedback: Feedback,
    streams: &mut TrialStreams,
) -> Result<Trajectory> {
    let x0 = system.sample_initial(&mut streams.initial);
    rollout_from(system, controller, estimator, feedback, x0, streams)
}

/// [`rollout`] from a given initial state.
pub fn rollout_from(
    system: &dyn ControlSystem,
    controller: &mut dyn Controller,
    estimator: &dyn Estimator,
    feedback: Feedback,
    x0: DVector<f64>,
    streams: &mut TrialStreams,
) -> Result<Trajectory> {
    let horizon = system.horizon();
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: 0 });
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut estimates = Vec::with_capacity(horizon);
    let mut inputs = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon + 1);
    let mut x = x0;
    for t in 0..horizon {
        let x_hat = estimator.estimate(&x, &mut streams.estimator);
        let u = match feedback {
            Feedback::Online => controller.control(t, &x_hat, &mut streams.policy)?,
            Feedback::Offline => controller.control(t, &x, &mut streams.policy)?,
        };
        stage_costs.push(system.stage_cost(t, &x, &u));
        let next = system.step(t, &x, &u, &mut RngNoise(&mut streams.auxiliary));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: t + 1 });
        }
        states.push(std::mem::replace(&mut x, next));
        estimates.push(x_hat);
        inputs.push(u);
    }
    stage_costs.push(system.terminal_cost(&x));
    states.push(x);
    let total_cost = stage_costs.iter().sum();
    Ok(Trajectory { states, estimates, inputs, stage_costs, total_cost })
}

/// Monte Carlo estimate of an expected cost. Failures (absorbing failure or
/// divergence) are counted separately and excluded from `mean`/`std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    /// `NaN` when every trial failed.
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
    pub n_failures: usize,
    pub failure_fraction: f64,
}

impl CostSummary {
    pub fn from_costs(costs: &[f64]) -> Self {
        assert!(!costs.is_empty(), "at least one trial is required");
        let finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
        let n_failures = costs.len() - finite.len();
        let (mean, std) = mean_std(&finite);
        Self {
            mean,
            std,
            n_trials: costs.len(),
            n_failures,
            failure_fraction: n_failures as f64 / costs.len() as f64,
        }
    }

    pub fn mean_defined(&self) -> bool {
        self.n_failures < self.n_trials
    }

    /// Standard error of `mean`.
    pub fn std_error(&self) -> f64 {
        let n = self.n_trials - self.n_failures;
        if n == 0 {
            f64::NAN
        } else {
            self.std / (n as f64).sqrt()
        }
    }
}

/// Sample mean and (unbiased) standard deviation; `(NaN, NaN)` when empty and
/// `std = 0` for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    match values.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (values[0], 0.0),
        n => {
            // shifted by the first value so identical inputs give exactly zero spread
            let k = values[0];
            let nf = n as f64;
            let s: f64 = values.iter().map(|v| v - k).sum();
            let ss: f64 = values.iter().map(|v| (v - k).powi(2)).sum();
            let var = ((ss - s * s / nf) / (nf - 1.0)).max(0.0);
            (k + s / nf, var.sqrt())
        }
    }
}

/// Per-trial outcome kept for paired comparisons.
#[derive(Debug, Clone)]
pub enum TrialOutcome {
    Completed(Trajectory),
    Diverged { step: usize },
    /// A sampling planner found no feasible proposal.
    Infeasible,
}

impl TrialOutcome {
    pub fn cost(&self) -> f64 {
        match self {
            TrialOutcome::Completed(tr) => tr.total_cost,
            TrialOutcome::Diverged { .. } | TrialOutcome::Infeasible => f64::INFINITY,
        }
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        match self {
            TrialOutcome::Completed(tr) => Some(tr),
            TrialOutcome::Diverged { .. } | TrialOutcome::Infeasible => None,
        }
    }
}

/// Runs `n_trials` independent rollouts. Trial `i` uses the streams of
/// `(seed, i)`, so results do not depend on thread count.
pub fn run_trials(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    estimator: &dyn Estimator,
    feedback: Feedback,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<TrialOutcome>> {
    (0..n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut streams = TrialStreams::new(seed, i);
            let mut controller = policy.controller();
            match rollout(system, controller.as_mut(), estimator, feedback, &mut streams) {
                Ok(tr) => Ok(TrialOutcome::Completed(tr)),
                Err(Error::Diverged { step }) => Ok(TrialOutcome::Diverged { step }),
                Err(Error::InfeasibleProposal { .. }) => Ok(TrialOutcome::Infeasible),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `J_on` (or `J_off` with a perfect estimator) by Monte Carlo.
pub fn monte_carlo_cost(
    system: &dyn ControlSystem,
    policy: &dyn Policy,
    estimator: &dyn Estimator,
    n_trials: usize,
    seed: u64,
) -> Result<CostSummary> {
    if n_trials == 0 {
        return Err(Error::TooFewSamples { got: 0, min: 1 });
    }
    let outcomes = run_trials(system, policy, estimator, Feedback::Online, n_trials, seed)?;
    let costs: Vec<f64> = outcomes.iter().map(TrialOutcome::cost).collect();
    Ok(CostSummary::from_costs(&costs))
}

/// Mean and standard error of paired differences `a_i - b_i`, skipping pairs
/// where either side failed. Returns `(mean, se, n_pairs)`.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64, usize) {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| x - y)
        .collect();
    let (m, s) = mean_std(&d);
    let se = if d.is_empty() { f64::NAN } else { s / (d.len() as f64).sqrt() };
    (m, se, d.len())
}

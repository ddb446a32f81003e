//! Sweeps over `(β, σ²)` cells for the three experiments.
//!
//! Every cell of a sweep runs trials `0..n_trials` on the streams of
//! `(seed, trial)`, so cells are paired by common random numbers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use brdp::dp::{
    estimate_gamma, lipschitz_level_quadratic, lqg_step_hamiltonian, lqg_trajectory_kl, optimize_beta, pilot_levels,
    rho_quantile, robustness_bound, DpCertificate, QuadraticMetric, RobustnessReport, Z95,
};
use brdp::lqg::{solve_br_lqg, BrLqgPolicy, LqrPolicy};
use brdp::samplers::{Bandwidth, GaussianSequencePrior, Model, Planner, RecedingHorizonPolicy, SvgdConfig, SvgdMode};
use brdp::system::{paired_difference, run_trials, CostSummary, Estimator, Feedback, Policy, Trajectory, TrialOutcome};
use brdp::systems::quadrotor::{initial_distribution, ESTIMATOR_SCALING, INITIAL_MEAN, INITIAL_VARIANCE};
use brdp::systems::{
    gaussian_estimator, linear_quadrotor_problem, linear_quadrotor_system, DoubleSlitWorld, NonlinearQuadrotor, Passage,
    QuadraticCost,
};

use crate::config::{parse_preconditioner, ConfigError, ExperimentConfig, ExperimentId};
use crate::plotdata;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure in cell {cell}: {source}")]
    Numerical { cell: String, source: brdp::Error },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RunError {
    /// Process exit code: 2 for configuration and output problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => 2,
            RunError::Numerical { .. } => 3,
        }
    }
}

/// One `(β, σ²)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub experiment: ExperimentId,
    pub beta: f64,
    pub sigma2: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub failure_fraction: f64,
    pub n_trials: usize,
    pub is_beta_star: bool,
    /// Certified upper bound on the online cost, `J_off + ΔJ-bound`.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CellDetail {
    /// Per-trial online cost; `∞` for failures, `NaN` for planner-infeasible trials.
    pub costs: Vec<f64>,
    pub extra: serde_json::Value,
    pub trajectories: Vec<Trajectory>,
    pub robustness: Option<RobustnessReport>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<CellRow>,
    pub details: Vec<CellDetail>,
}

impl SweepResult {
    pub fn cell(&self, beta: f64, sigma2: f64) -> Option<(&CellRow, &CellDetail)> {
        self.rows.iter().zip(&self.details).find(|(r, _)| r.beta == beta && r.sigma2 == sigma2)
    }
}

/// Paired difference `J(β) − J(∞)` within one σ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub sigma2: f64,
    pub beta: f64,
    pub baseline_mean: f64,
    pub mean: f64,
    pub difference: f64,
    pub std_error: f64,
    pub ci95: f64,
    pub n_pairs: usize,
}

fn numerical(cell: String) -> impl FnOnce(brdp::Error) -> RunError {
    move |source| RunError::Numerical { cell, source }
}

fn cell_name(id: ExperimentId, beta: f64, sigma2: f64) -> String {
    format!("{id} beta={beta} sigma2={sigma2}")
}

pub fn quadratic_cost(cfg: &ExperimentConfig) -> Result<QuadraticCost, ConfigError> {
    Ok(QuadraticCost { q: cfg.cost.q.to_matrix(6)?, r: cfg.cost.r.to_matrix(2)?, q_f: cfg.cost.q_f.to_matrix(6)? })
}

fn estimator_for(cfg: &ExperimentConfig, sigma2: f64, default_scaling: &[f64]) -> Result<Box<dyn Estimator>, RunError> {
    let scaling = cfg.system.estimator_scaling.clone().unwrap_or_else(|| default_scaling.to_vec());
    if scaling.len() != default_scaling.len() {
        return Err(ConfigError::Invalid(format!("estimator_scaling needs {} entries", default_scaling.len())).into());
    }
    let est = gaussian_estimator(sigma2, &scaling).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(Box::new(est))
}

fn summarize(id: ExperimentId, beta: f64, sigma2: f64, costs: &[f64], bound: Option<f64>) -> CellRow {
    let s = CostSummary::from_costs(costs);
    CellRow {
        experiment: id,
        beta,
        sigma2,
        mean_cost: s.mean,
        std_cost: s.std,
        failure_fraction: s.failure_fraction,
        n_trials: s.n_trials,
        is_beta_star: false,
        bound,
    }
}

fn kept(outcomes: &[TrialOutcome], n: usize) -> Vec<Trajectory> {
    outcomes.iter().filter_map(TrialOutcome::trajectory).take(n).cloned().collect()
}

fn outcome_costs(outcomes: &[TrialOutcome]) -> Vec<f64> {
    outcomes
        .iter()
        .map(|o| match o {
            TrialOutcome::Infeasible => f64::NAN,
            o => o.cost(),
        })
        .collect()
}

/// Runs every cell of the sweep and marks β* per σ².
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult, RunError> {
    cfg.validate()?;
    let mut cells = match cfg.experiment {
        ExperimentId::LqgQuadrotor => lqg_cells(cfg)?,
        ExperimentId::SvmpcQuadrotor => svmpc_cells(cfg)?,
        ExperimentId::DoubleSlit => double_slit_cells(cfg)?,
    };
    // β ascending, then σ²
    cells.sort_by(|a, b| a.0.beta.total_cmp(&b.0.beta).then(a.0.sigma2.total_cmp(&b.0.sigma2)));
    let (mut rows, details): (Vec<CellRow>, Vec<CellDetail>) = cells.into_iter().unzip();
    mark_beta_star(&mut rows);
    Ok(SweepResult { rows, details })
}

/// Flags the minimum-mean-cost β per σ², ties toward the smaller β.
pub fn mark_beta_star(rows: &mut [CellRow]) {
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma2).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    for s in sigmas {
        let grid: Vec<f64> = rows.iter().filter(|r| r.sigma2 == s).map(|r| r.beta).collect();
        let value = |b: f64| {
            let r = rows.iter().find(|r| r.sigma2 == s && r.beta == b).expect("row exists");
            Ok(if r.mean_cost.is_finite() { r.mean_cost } else { f64::INFINITY })
        };
        if let Ok((star, _)) = optimize_beta(&grid, value) {
            for r in rows.iter_mut().filter(|r| r.sigma2 == s) {
                r.is_beta_star = r.beta == star;
            }
        }
    }
}

/// Minimizer of the certified bound per σ², when any cell is certified.
pub fn bound_beta_star(rows: &[CellRow]) -> Vec<(f64, Option<f64>)> {
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma2).collect();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();
    sigmas
        .into_iter()
        .map(|s| {
            let grid: Vec<f64> = rows.iter().filter(|r| r.sigma2 == s && r.bound.is_some()).map(|r| r.beta).collect();
            let star = optimize_beta(&grid, |b| {
                Ok(rows.iter().find(|r| r.sigma2 == s && r.beta == b).and_then(|r| r.bound).unwrap_or(f64::INFINITY))
            })
            .ok()
            .map(|(b, _)| b);
            (s, star)
        })
        .collect()
}

type Cell = (CellRow, CellDetail);

fn lqg_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>, RunError> {
    let id = cfg.experiment;
    let params = cfg.system.quadrotor();
    let cost = quadratic_cost(cfg)?;
    let initial = initial_distribution(&INITIAL_MEAN, &INITIAL_VARIANCE);
    let (sys, lqr) = linear_quadrotor_system(&params, &cost, initial, cfg.prior_ridge()).map_err(numerical(format!("{id} setup")))?;
    let mut cells = Vec::new();
    for beta in cfg.betas() {
        let name = |s: f64| cell_name(id, beta, s);
        let br: Option<BrLqgPolicy> =
            if beta.is_finite() { Some(solve_br_lqg(&sys.problem, beta).map_err(numerical(name(f64::NAN)))?) } else { None };
        let lqr_policy = LqrPolicy { solution: lqr.clone() };
        let policy: &dyn Policy = match &br {
            Some(p) => p,
            None => &lqr_policy,
        };
        let hams: Vec<_> = match &br {
            Some(p) => (0..sys.problem.horizon()).map(|t| lqg_step_hamiltonian(&sys.problem, p, t)).collect(),
            None => vec![],
        };
        let level_of = |t: usize, u: &DVector<f64>| lipschitz_level_quadratic(&hams[t], u);
        let levels = match (&br, cfg.certify.enabled) {
            (Some(p), true) => Some(
                pilot_levels(&sys, p, &level_of, cfg.certify.level_quantile, cfg.certify.pilot_trials, cfg.seed.wrapping_add(1))
                    .map_err(numerical(name(f64::NAN)))?,
            ),
            _ => None,
        };
        for sigma2 in cfg.sigma2_values() {
            let est = estimator_for(cfg, sigma2, &ESTIMATOR_SCALING)?;
            let outcomes =
                run_trials(&sys, policy, est.as_ref(), Feedback::Online, cfg.n_trials, cfg.seed).map_err(numerical(name(sigma2)))?;
            let costs = outcome_costs(&outcomes);
            let mut extra = serde_json::json!({ "kind": if br.is_some() { "br-lqg" } else { "lqr" } });
            let mut robustness = None;
            let mut bound = None;
            if let (Some(p), Some(levels)) = (&br, &levels) {
                let fail = numerical(name(sigma2));
                let n = cfg.n_trials.max(brdp::dp::MIN_GAMMA_SAMPLES);
                let certified = (|| {
                    let gamma = estimate_gamma(&sys, p, est.as_ref(), &QuadraticMetric, &level_of, beta, levels, n, cfg.seed.wrapping_add(2))?;
                    let radius =
                        rho_quantile(&sys, p, est.as_ref(), &QuadraticMetric, cfg.certify.radius_quantile, n, cfg.seed.wrapping_add(2))?;
                    let cert = DpCertificate::new(beta, levels, gamma.gamma, gamma.gamma_ci95, radius);
                    let kl = |tr: &Trajectory| lqg_trajectory_kl(p, &sys.problem, tr);
                    let report = robustness_bound(&sys, p, est.as_ref(), &QuadraticMetric, &cert, &kl, beta, cfg.n_trials.max(2), cfg.seed)?;
                    Ok::<_, brdp::Error>((gamma, cert, report))
                })();
                let (gamma, cert, report) = certified.map_err(fail)?;
                bound = Some(report.j_off.mean + report.bound);
                extra["gamma"] = serde_json::to_value(&gamma).expect("serializable");
                extra["certificate"] = cert.to_json();
                extra["robustness"] = report.to_json();
                robustness = Some(report);
            }
            cells.push((
                summarize(id, beta, sigma2, &costs, bound),
                CellDetail { costs, extra, trajectories: kept(&outcomes, cfg.keep_trajectories), robustness },
            ));
        }
    }
    Ok(cells)
}

/// The SVGD settings for one β; β = ∞ selects the gradient-descent baseline.
pub fn svgd_config(cfg: &ExperimentConfig, beta: f64) -> Result<SvgdConfig, ConfigError> {
    let s = &cfg.svgd;
    let bandwidth: Bandwidth = cfg.svgd_bandwidth()?;
    Ok(if beta.is_finite() {
        SvgdConfig {
            n_particles: s.particles,
            n_iterations: s.iterations,
            step_size: s.step,
            bandwidth,
            beta,
            preconditioner: parse_preconditioner(&s.preconditioner)?,
            mode: SvgdMode::Sample,
            trace: false,
        }
    } else {
        SvgdConfig {
            n_particles: s.particles,
            n_iterations: s.argmin_iterations,
            step_size: s.argmin_step,
            bandwidth,
            beta: 1.0,
            preconditioner: parse_preconditioner(&s.argmin_preconditioner)?,
            mode: SvgdMode::Argmin,
            trace: false,
        }
    })
}

fn svmpc_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>, RunError> {
    let id = cfg.experiment;
    let params = cfg.system.quadrotor();
    let cost = quadratic_cost(cfg)?;
    let initial = initial_distribution(&INITIAL_MEAN, &INITIAL_VARIANCE);
    let (problem, _) = linear_quadrotor_problem(&params, &cost, &initial, cfg.prior_ridge()).map_err(numerical(format!("{id} setup")))?;
    let prior = GaussianSequencePrior::independent(problem.prior()).map_err(numerical(format!("{id} setup")))?;
    let sys = NonlinearQuadrotor { params, cost, initial, method: cfg.system.discretization };
    let mut cells = Vec::new();
    for beta in cfg.betas() {
        let planner = Planner::Svgd(svgd_config(cfg, beta)?);
        let policy = RecedingHorizonPolicy::new(Model::Differentiable(&sys), &prior, planner, cfg.replan_every())
            .map_err(numerical(cell_name(id, beta, f64::NAN)))?;
        for sigma2 in cfg.sigma2_values() {
            let est = estimator_for(cfg, sigma2, &ESTIMATOR_SCALING)?;
            let outcomes = run_trials(&sys, &policy, est.as_ref(), Feedback::Online, cfg.n_trials, cfg.seed)
                .map_err(numerical(cell_name(id, beta, sigma2)))?;
            let costs = outcome_costs(&outcomes);
            let extra = serde_json::json!({ "kind": if beta.is_finite() { "sv-mpc" } else { "argmin-mpc" } });
            cells.push((
                summarize(id, beta, sigma2, &costs, None),
                CellDetail { costs, extra, trajectories: kept(&outcomes, cfg.keep_trajectories), robustness: None },
            ));
        }
    }
    Ok(cells)
}

/// Passage counts over accepted (goal-reaching) rollouts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PassageCounts {
    pub accepted: usize,
    pub wide: usize,
    pub narrow: usize,
    pub infeasible: usize,
    pub failed: usize,
    /// Accepted rollouts whose motion segments touch an obstacle; always 0.
    pub colliding: usize,
}

impl PassageCounts {
    pub fn wide_fraction(&self) -> f64 {
        self.wide as f64 / self.accepted as f64
    }
}

pub fn passage_counts(world: &DoubleSlitWorld, outcomes: &[TrialOutcome]) -> PassageCounts {
    let mut c = PassageCounts::default();
    for o in outcomes {
        match o {
            TrialOutcome::Infeasible => c.infeasible += 1,
            TrialOutcome::Diverged { .. } => c.failed += 1,
            TrialOutcome::Completed(tr) => {
                if !tr.total_cost.is_finite() || !world.in_goal(tr.states.last().expect("nonempty")) {
                    c.failed += 1;
                    continue;
                }
                c.accepted += 1;
                c.colliding += world.path_collides(&tr.states) as usize;
                match world.passage(&tr.states) {
                    Passage::Wide => c.wide += 1,
                    Passage::Narrow => c.narrow += 1,
                    Passage::None => {}
                }
            }
        }
    }
    c
}

fn double_slit_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>, RunError> {
    let id = cfg.experiment;
    let world = DoubleSlitWorld::new(cfg.slit.clone()).map_err(ConfigError::Invalid)?;
    let prior = GaussianSequencePrior::squared_exponential(2, cfg.slit.horizon, cfg.prior.sd, cfg.prior.length_scale)
        .map_err(numerical(format!("{id} setup")))?;
    let mut cells = Vec::new();
    for beta in cfg.betas() {
        let planner = Planner::ImportanceSampling { beta, n_samples: cfg.planner.samples };
        let policy = RecedingHorizonPolicy::new(Model::Plain(&world), &prior, planner, cfg.replan_every())
            .map_err(numerical(cell_name(id, beta, f64::NAN)))?;
        for sigma2 in cfg.sigma2_values() {
            let est = estimator_for(cfg, sigma2, &[1.0, 1.0])?;
            let outcomes = run_trials(&world, &policy, est.as_ref(), Feedback::Online, cfg.n_trials, cfg.seed)
                .map_err(numerical(cell_name(id, beta, sigma2)))?;
            let counts = passage_counts(&world, &outcomes);
            let costs = outcome_costs(&outcomes);
            let extra = serde_json::json!({
                "passages": counts,
                "wide_fraction": plotdata::json_f64(counts.wide_fraction()),
            });
            cells.push((
                summarize(id, beta, sigma2, &costs, None),
                CellDetail { costs, extra, trajectories: kept(&outcomes, cfg.keep_trajectories), robustness: None },
            ));
        }
    }
    Ok(cells)
}

/// Paired differences of every finite β against β = ∞ in the same σ².
pub fn paired_table(result: &SweepResult) -> Vec<PairedRow> {
    let mut out = Vec::new();
    for (row, detail) in result.rows.iter().zip(&result.details) {
        if row.beta.is_infinite() {
            continue;
        }
        if let Some((base_row, base)) = result.cell(f64::INFINITY, row.sigma2) {
            let (d, se, n) = paired_difference(&detail.costs, &base.costs);
            out.push(PairedRow {
                sigma2: row.sigma2,
                beta: row.beta,
                baseline_mean: base_row.mean_cost,
                mean: row.mean_cost,
                difference: d,
                std_error: se,
                ci95: Z95 * se,
                n_pairs: n,
            });
        }
    }
    out
}

/// Runs the sweep with the β = ∞ baseline included and pairs every finite β
/// against it.
pub fn compare_baseline(cfg: &ExperimentConfig) -> Result<(SweepResult, Vec<PairedRow>), RunError> {
    let mut cfg = cfg.clone();
    if let Some(v) = cfg.beta.values.as_mut() {
        if !v.contains(&f64::INFINITY) {
            v.push(f64::INFINITY);
        }
    }
    cfg.beta.include_inf = Some(true);
    let result = run_sweep(&cfg)?;
    let table = paired_table(&result);
    Ok((result, table))
}

/// Runs the sweep and writes `<id>.csv`, `<id>.json` and
/// `<id>_trajectories.jsonl` to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepResult, RunError> {
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io { path: out_dir.display().to_string(), source })?;
    let result = run_sweep(cfg)?;
    persist(cfg, &result, out_dir)?;
    Ok(result)
}

pub fn persist(cfg: &ExperimentConfig, result: &SweepResult, out_dir: &Path) -> Result<(), RunError> {
    let id = cfg.experiment.as_str();
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| RunError::Io { path, source }
    };
    let csv_path = out_dir.join(format!("{id}.csv"));
    let file = fs::File::create(&csv_path).map_err(io(&csv_path))?;
    plotdata::emit_plotdata(&result.rows, BufWriter::new(file)).map_err(io(&csv_path))?;

    let cells: Vec<serde_json::Value> = result
        .rows
        .iter()
        .zip(&result.details)
        .map(|(r, d)| {
            serde_json::json!({
                "beta": plotdata::json_f64(r.beta),
                "sigma2": r.sigma2,
                "mean_cost": plotdata::json_f64(r.mean_cost),
                "std_cost": plotdata::json_f64(r.std_cost),
                "failure_fraction": r.failure_fraction,
                "n_trials": r.n_trials,
                "is_beta_star": r.is_beta_star,
                "bound": r.bound.map(plotdata::json_f64),
                "detail": d.extra,
            })
        })
        .collect();
    let paired: Vec<serde_json::Value> = paired_table(result)
        .iter()
        .map(|p| {
            serde_json::json!({
                "sigma2": p.sigma2,
                "beta": p.beta,
                "baseline_mean": plotdata::json_f64(p.baseline_mean),
                "mean": plotdata::json_f64(p.mean),
                "difference": plotdata::json_f64(p.difference),
                "difference_ci95": plotdata::json_f64(p.ci95),
                "n_pairs": p.n_pairs,
            })
        })
        .collect();
    let bound_star: Vec<serde_json::Value> = bound_beta_star(&result.rows)
        .into_iter()
        .map(|(s, b)| serde_json::json!({"sigma2": s, "beta_star": b.map(plotdata::json_f64)}))
        .collect();
    let summary = serde_json::json!({
        "experiment": id,
        "seed": cfg.seed,
        "n_trials": cfg.n_trials,
        "cells": cells,
        "paired_with_baseline": paired,
        "bound_beta_star": bound_star,
    });
    let json_path = out_dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
    fs::write(&json_path, text).map_err(io(&json_path))?;

    let traj_path = out_dir.join(format!("{id}_trajectories.jsonl"));
    let mut w = BufWriter::new(fs::File::create(&traj_path).map_err(io(&traj_path))?);
    for (r, d) in result.rows.iter().zip(&result.details) {
        for (i, tr) in d.trajectories.iter().enumerate() {
            let t: serde_json::Value = serde_json::from_str(&tr.to_json_line()).expect("valid json");
            let line = serde_json::json!({"beta": plotdata::json_f64(r.beta), "sigma2": r.sigma2, "index": i, "trajectory": t});
            writeln!(w, "{line}").map_err(io(&traj_path))?;
        }
    }
    w.flush().map_err(io(&traj_path))?;
    Ok(())
}

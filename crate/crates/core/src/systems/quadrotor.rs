//! Planar quadrotor with state `(y, z, θ, ẏ, ż, θ̇)` and rotor-pair thrusts.
//!
//! Controllers act on thrust deviations from hover, `u = thrust − mg/2`, so the
//! nonlinear and linearized models share the same input coordinates and the
//! same quadratic cost.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian::Gaussian;
use crate::lqg::{lqr_gains, lqr_projected_prior, LinearSystem, LqgProblem, LqrSolution};
use crate::system::{ControlSystem, DifferentiableSystem, NoiseSource};

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 2;

/// Per-coordinate estimation-noise scaling.
pub const ESTIMATOR_SCALING: [f64; 6] = [0.25, 0.25, 0.1, 0.25, 0.25, 0.1];
pub const INITIAL_MEAN: [f64; 6] = [1.0, -1.0, 0.0, 0.0, 0.0, 0.0];
pub const INITIAL_VARIANCE: [f64; 6] = [1e-2, 1e-2, 1e-6, 1e-4, 1e-4, 1e-8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia: f64,
    pub gravity: f64,
    /// Rotor arm length.
    pub arm: f64,
    pub dt: f64,
    pub horizon: usize,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self { mass: 0.03, inertia: 1.43e-5, gravity: 9.81, arm: 0.046, dt: 0.3, horizon: 13 }
    }
}

impl QuadrotorParams {
    /// Thrust per rotor pair at hover.
    pub fn hover_thrust(&self) -> f64 {
        0.5 * self.mass * self.gravity
    }
}

/// Quadratic cost weights `½(xᵀQx + uᵀRu)`, terminal `½xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
}

impl Default for QuadraticCost {
    fn default() -> Self {
        Self {
            q: DMatrix::identity(STATE_DIM, STATE_DIM),
            r: DMatrix::identity(INPUT_DIM, INPUT_DIM) * 0.1,
            q_f: DMatrix::identity(STATE_DIM, STATE_DIM),
        }
    }
}

/// `(ẏ, ż, θ̇, ÿ, z̈, θ̈)` for absolute thrusts `thrust = (u₁, u₂)`.
pub fn dynamics_continuous(p: &QuadrotorParams, x: &DVector<f64>, thrust: &DVector<f64>) -> DVector<f64> {
    let total = thrust[0] + thrust[1];
    let (s, c) = x[2].sin_cos();
    DVector::from_vec(vec![
        x[3],
        x[4],
        x[5],
        -total * s / p.mass,
        total * c / p.mass - p.gravity,
        p.arm * (thrust[0] - thrust[1]) / p.inertia,
    ])
}

/// `(∂f/∂x, ∂f/∂u)` at `(x, thrust)`.
pub fn continuous_jacobians(p: &QuadrotorParams, x: &DVector<f64>, thrust: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let total = thrust[0] + thrust[1];
    let (s, c) = x[2].sin_cos();
    let mut fx = DMatrix::zeros(STATE_DIM, STATE_DIM);
    fx[(0, 3)] = 1.0;
    fx[(1, 4)] = 1.0;
    fx[(2, 5)] = 1.0;
    fx[(3, 2)] = -total * c / p.mass;
    fx[(4, 2)] = -total * s / p.mass;
    let mut fu = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for j in 0..2 {
        fu[(3, j)] = -s / p.mass;
        fu[(4, j)] = c / p.mass;
    }
    fu[(5, 0)] = p.arm / p.inertia;
    fu[(5, 1)] = -p.arm / p.inertia;
    (fx, fu)
}

/// Central finite-difference Jacobians of an arbitrary vector field.
pub fn finite_difference_jacobians<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>)
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let n = f(x, u).len();
    let mut fx = DMatrix::zeros(n, x.len());
    for j in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += h;
        xm[j] -= h;
        fx.set_column(j, &((f(&xp, u) - f(&xm, u)) / (2.0 * h)));
    }
    let mut fu = DMatrix::zeros(n, u.len());
    for j in 0..u.len() {
        let (mut up, mut um) = (u.clone(), u.clone());
        up[j] += h;
        um[j] -= h;
        fu.set_column(j, &((f(x, &up) - f(x, &um)) / (2.0 * h)));
    }
    (fx, fu)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    Euler,
    Rk4,
}

/// One step of `ẋ = f(x, u)` with `u` held constant.
pub fn discretize<F>(f: F, method: Discretization, dt: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    match method {
        Discretization::Euler => x + f(x, u) * dt,
        Discretization::Rk4 => {
            let k1 = f(x, u);
            let k2 = f(&(x + &k1 * (0.5 * dt)), u);
            let k3 = f(&(x + &k2 * (0.5 * dt)), u);
            let k4 = f(&(x + &k3 * dt), u);
            x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    }
}

/// Vector-Jacobian product `(λᵀ∂x⁺/∂x, λᵀ∂x⁺/∂u)` of [`discretize`], given the
/// field and its Jacobians.
pub fn discretize_vjp<F, J>(
    f: F,
    jac: J,
    method: Discretization,
    dt: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>)
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>),
{
    match method {
        Discretization::Euler => {
            let (fx, fu) = jac(x, u);
            (lambda + fx.tr_mul(lambda) * dt, fu.tr_mul(lambda) * dt)
        }
        Discretization::Rk4 => {
            let k1 = f(x, u);
            let x2 = x + &k1 * (0.5 * dt);
            let k2 = f(&x2, u);
            let x3 = x + &k2 * (0.5 * dt);
            let k3 = f(&x3, u);
            let x4 = x + &k3 * dt;
            let mut gx = lambda.clone();
            let mut gu = DVector::zeros(u.len());
            let mut g_k3 = lambda * (dt / 3.0);
            let mut g_k2 = lambda * (dt / 3.0);
            let mut g_k1 = lambda * (dt / 6.0);

            let (fx, fu) = jac(&x4, u);
            let g = lambda * (dt / 6.0);
            let g_x4 = fx.tr_mul(&g);
            gu += fu.tr_mul(&g);
            gx += &g_x4;
            g_k3 += g_x4 * dt;

            let (fx, fu) = jac(&x3, u);
            let g_x3 = fx.tr_mul(&g_k3);
            gu += fu.tr_mul(&g_k3);
            gx += &g_x3;
            g_k2 += g_x3 * (0.5 * dt);

            let (fx, fu) = jac(&x2, u);
            let g_x2 = fx.tr_mul(&g_k2);
            gu += fu.tr_mul(&g_k2);
            gx += &g_x2;
            g_k1 += g_x2 * (0.5 * dt);

            let (fx, fu) = jac(x, u);
            gx += fx.tr_mul(&g_k1);
            gu += fu.tr_mul(&g_k1);
            (gx, gu)
        }
    }
}

/// Discrete `(A, B)` from the hover Jacobians: `A = I + Δt·∂f/∂x`, `B = Δt·∂f/∂u`.
pub fn linearize_quadrotor(p: &QuadrotorParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let hover = DVector::from_element(INPUT_DIM, p.hover_thrust());
    let (fx, fu) = continuous_jacobians(p, &DVector::zeros(STATE_DIM), &hover);
    (DMatrix::identity(STATE_DIM, STATE_DIM) + fx * p.dt, fu * p.dt)
}

/// `N(x̄₀, diag σ²_{x₀})` with the default mean and variances.
pub fn quadrotor_initial_distribution() -> Gaussian {
    initial_distribution(&INITIAL_MEAN, &INITIAL_VARIANCE)
}

/// A diagonal Gaussian; zero variances give a point mass up to ~1e-150.
pub fn initial_distribution(mean: &[f64], variance: &[f64]) -> Gaussian {
    // zero variances are floored so the covariance stays factorizable
    let var = DVector::from_iterator(variance.len(), variance.iter().map(|v| v.max(1e-300)));
    Gaussian::new(DVector::from_column_slice(mean), DMatrix::from_diagonal(&var)).expect("diagonal covariance")
}

/// Linearized quadrotor LQG problem with the LQR-projected Gaussian input prior.
pub fn linear_quadrotor_problem(
    params: &QuadrotorParams,
    cost: &QuadraticCost,
    initial: &Gaussian,
    prior_ridge: f64,
) -> Result<(LqgProblem, LqrSolution)> {
    let (a, b) = linearize_quadrotor(params);
    let lqr = lqr_gains(&a, &b, &cost.q, &cost.r, &cost.q_f, params.horizon)?;
    let prior = lqr_projected_prior(&a, &b, &lqr, initial, None, prior_ridge)?;
    let problem = LqgProblem::new(a, b, cost.q.clone(), cost.r.clone(), cost.q_f.clone(), vec![], prior)?;
    Ok((problem, lqr))
}

pub fn linear_quadrotor_system(
    params: &QuadrotorParams,
    cost: &QuadraticCost,
    initial: Gaussian,
    prior_ridge: f64,
) -> Result<(LinearSystem, LqrSolution)> {
    let (problem, lqr) = linear_quadrotor_problem(params, cost, &initial, prior_ridge)?;
    Ok((LinearSystem { problem, initial }, lqr))
}

/// The nonlinear quadrotor, driven by thrust deviations from hover.
#[derive(Debug, Clone)]
pub struct NonlinearQuadrotor {
    pub params: QuadrotorParams,
    pub cost: QuadraticCost,
    pub initial: Gaussian,
    pub method: Discretization,
}

impl NonlinearQuadrotor {
    pub fn new(params: QuadrotorParams, cost: QuadraticCost, initial: Gaussian) -> Self {
        Self { params, cost, initial, method: Discretization::Rk4 }
    }

    fn field(&self) -> impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + '_ {
        let hover = self.params.hover_thrust();
        move |x, du| dynamics_continuous(&self.params, x, &du.add_scalar(hover))
    }

    fn field_jacobians(&self) -> impl Fn(&DVector<f64>, &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) + '_ {
        let hover = self.params.hover_thrust();
        move |x, du| continuous_jacobians(&self.params, x, &du.add_scalar(hover))
    }
}

impl ControlSystem for NonlinearQuadrotor {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        INPUT_DIM
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn step(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, _noise: &mut dyn NoiseSource) -> DVector<f64> {
        discretize(self.field(), self.method, self.params.dt, x, u)
    }

    fn stage_cost(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.cost.q * x)) + u.dot(&(&self.cost.r * u)))
    }

    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.cost.q_f * x))
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.initial.sample(rng)
    }
}

impl DifferentiableSystem for NonlinearQuadrotor {
    fn stage_cost_grad(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.cost.q * x, &self.cost.r * u)
    }

    fn terminal_cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.cost.q_f * x
    }

    fn step_vjp(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>, lambda: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        discretize_vjp(self.field(), self.field_jacobians(), self.method, self.params.dt, x, u, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::NullNoise;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hover(p: &QuadrotorParams) -> DVector<f64> {
        DVector::from_element(2, p.hover_thrust())
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let p = QuadrotorParams::default();
        let d = dynamics_continuous(&p, &DVector::zeros(6), &hover(&p));
        assert!(d.amax() < 1e-15);
    }

    #[test]
    fn level_thrust_balances_gravity() {
        let p = QuadrotorParams::default();
        let x = dvector![0.4, -0.3, 0.0, 0.2, 0.1, 0.0];
        let d = dynamics_continuous(&p, &x, &dvector![0.01, p.mass * p.gravity - 0.01]);
        assert!(d[3].abs() < 1e-15);
        assert!(d[4].abs() < 1e-12);
        assert!((d[0] - 0.2).abs() < 1e-15 && (d[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn differential_thrust_spins() {
        let p = QuadrotorParams::default();
        let u = dvector![p.hover_thrust() + 1e-3, p.hover_thrust() - 1e-3];
        let d = dynamics_continuous(&p, &DVector::zeros(6), &u);
        assert!((d[5] - p.arm * 2e-3 / p.inertia).abs() < 1e-9);
        assert!(d[3].abs() < 1e-15 && d[4].abs() < 1e-12);
    }

    #[test]
    fn euler_and_rk4_on_scalar_linear_field() {
        let a = -0.7;
        let dt = 0.3;
        let f = |x: &DVector<f64>, _: &DVector<f64>| x * a;
        let x = dvector![2.0];
        let u = dvector![0.0];
        let e = discretize(f, Discretization::Euler, dt, &x, &u);
        assert!((e[0] - 2.0 * (1.0 + a * dt)).abs() < 1e-15);
        let r = discretize(f, Discretization::Rk4, dt, &x, &u);
        let h = a * dt;
        let expected = 2.0 * (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0);
        assert!((r[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn hover_rollout_stays_at_hover() {
        let p = QuadrotorParams::default();
        for method in [Discretization::Euler, Discretization::Rk4] {
            let sys = NonlinearQuadrotor { method, ..NonlinearQuadrotor::new(p.clone(), QuadraticCost::default(), quadrotor_initial_distribution()) };
            let mut x = DVector::zeros(6);
            for t in 0..p.horizon {
                x = sys.step(t, &x, &DVector::zeros(2), &mut NullNoise);
            }
            assert!(x.amax() < 1e-12);
        }
    }

    #[test]
    fn linearization_structure() {
        let p = QuadrotorParams::default();
        let (a, b) = linearize_quadrotor(&p);
        for i in 0..3 {
            assert_eq!(a[(i, i + 3)], p.dt);
        }
        assert!((b[(4, 0)] - 10.0).abs() < 1e-12 && (b[(4, 1)] - 10.0).abs() < 1e-12);
        assert!((a[(3, 2)] + p.dt * p.gravity).abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = QuadrotorParams::default();
        let f = |x: &DVector<f64>, u: &DVector<f64>| dynamics_continuous(&p, x, u);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for x in [DVector::zeros(6), crate::gaussian::standard_normal(&mut rng, 6) * 0.3] {
            let u = hover(&p) + crate::gaussian::standard_normal(&mut rng, 2) * 0.01;
            let (fx, fu) = continuous_jacobians(&p, &x, &u);
            let (nx, nu) = finite_difference_jacobians(f, &x, &u, 1e-6);
            assert!((&fx - nx).amax() < 1e-6 * (1.0 + fx.amax()));
            assert!((&fu - nu).amax() < 1e-6 * (1.0 + fu.amax()));
        }
    }

    #[test]
    fn one_step_linear_and_nonlinear_agree_to_second_order() {
        let p = QuadrotorParams::default();
        let sys = NonlinearQuadrotor { method: Discretization::Euler, ..NonlinearQuadrotor::new(p.clone(), QuadraticCost::default(), quadrotor_initial_distribution()) };
        let (a, b) = linearize_quadrotor(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let dir = crate::gaussian::standard_normal(&mut rng, 8);
            let dir = &dir / dir.norm();
            let delta = 1e-3;
            let x = dir.rows(0, 6).into_owned() * delta;
            let u = dir.rows(6, 2).into_owned() * delta;
            let nl = sys.step(0, &x, &u, &mut NullNoise);
            let lin = &a * &x + &b * &u;
            assert!((nl - lin).norm() <= 10.0 * delta * delta * (1.0 + b.amax()));
        }
    }

    #[test]
    fn rk4_vjp_matches_finite_differences() {
        let p = QuadrotorParams::default();
        let sys = NonlinearQuadrotor::new(p, QuadraticCost::default(), quadrotor_initial_distribution());
        let x = dvector![0.3, -0.2, 0.1, 0.05, -0.1, 0.2];
        let u = dvector![0.002, -0.001];
        let lam = dvector![1.0, -0.5, 0.2, 0.3, 0.7, -0.1];
        let (gx, gu) = sys.step_vjp(0, &x, &u, &lam);
        let g = |x: &DVector<f64>, u: &DVector<f64>| DVector::from_element(1, lam.dot(&sys.step(0, x, u, &mut NullNoise)));
        let (nx, nu) = finite_difference_jacobians(g, &x, &u, 1e-7);
        assert!((gx - nx.row(0).transpose()).amax() < 1e-5 * (1.0 + nx.amax()));
        assert!((gu - nu.row(0).transpose()).amax() < 1e-4 * (1.0 + nu.amax()));
    }

    #[test]
    fn initial_distribution_moments() {
        let d = quadrotor_initial_distribution();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let xs: Vec<DVector<f64>> = (0..n).map(|_| d.sample(&mut rng)).collect();
        let mean = xs.iter().fold(DVector::zeros(6), |a, x| a + x) / n as f64;
        for i in 0..6 {
            assert!((mean[i] - INITIAL_MEAN[i]).abs() < 3.0 * (INITIAL_VARIANCE[i] / n as f64).sqrt());
        }
        let var_theta = xs.iter().map(|x| (x[2] - mean[2]).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var_theta / 1e-6 - 1.0).abs() < 0.05);
        let point = initial_distribution(&INITIAL_MEAN, &[0.0; 6]);
        assert!((point.sample(&mut rng) - DVector::from_column_slice(&INITIAL_MEAN)).amax() < 1e-100);
    }
}

//! At very large β the Stein update on the nonlinear quadrotor is dominated by
//! the cost gradient, so each particle follows its own gradient-descent path.

use brdp::samplers::*;
use brdp::systems::quadrotor::*;
use brdp::systems::QuadraticCost;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn large_beta_particles_match_gradient_descent_restarts() {
    let params = QuadrotorParams::default();
    let cost = QuadraticCost::default();
    let initial = quadrotor_initial_distribution();
    let (problem, _) = linear_quadrotor_problem(&params, &cost, &initial, 1e-8).unwrap();
    let prior = GaussianSequencePrior::independent(problem.prior()).unwrap();
    let sys = NonlinearQuadrotor::new(params, cost, initial.clone());
    let ham = TrajectoryHamiltonian::new(Model::Differentiable(&sys), 0, initial.mean().clone()).unwrap();

    let beta = 1e6;
    let step = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let starts: Vec<DVector<f64>> = (0..8).map(|_| prior.sample(0, &mut rng)).collect();
    let common = SvgdConfig { n_particles: 8, n_iterations: 400, preconditioner: Preconditioner::LocalLaplace, ..Default::default() };
    // the Stein average weights a particle's own gradient by 1/n
    let stein = SvgdConfig { beta, step_size: step, n_iterations: 3200, ..common.clone() };
    let descent = SvgdConfig { mode: SvgdMode::Argmin, step_size: step, ..common };
    let a = svgd_from_particles(&ham, &prior, &stein, starts.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = svgd_from_particles(&ham, &prior, &descent, starts.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let before: Vec<f64> = starts.iter().map(|u| ham.evaluate(u)).collect();
    for i in 0..8 {
        assert!(b.costs[i] < before[i], "descent made no progress on particle {i}");
        let rel = (a.costs[i] - b.costs[i]).abs() / b.costs[i];
        assert!(rel < 0.01, "particle {i}: stein {} vs descent {} (start {})", a.costs[i], b.costs[i], before[i]);
    }
}

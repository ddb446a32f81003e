//! Experiment environments.

pub mod double_slit;
pub mod estimator;
pub mod quadrotor;

pub use double_slit::{DoubleSlitWorld, Passage, Rect, SlitGeometry};
pub use estimator::{gaussian_estimator, GaussianEstimator};
pub use quadrotor::{
    linear_quadrotor_problem, linear_quadrotor_system, linearize_quadrotor, quadrotor_initial_distribution, Discretization,
    NonlinearQuadrotor, QuadraticCost, QuadrotorParams,
};

/// A double-slit world with the given geometry.
pub fn double_slit_system(geometry: SlitGeometry) -> Result<DoubleSlitWorld, String> {
    DoubleSlitWorld::new(geometry)
}

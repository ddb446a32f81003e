//! Bounded-rational control: Gibbs policies, the LQG recursion, sampling
//! controllers and differential-privacy style robustness certificates.

pub mod dp;
pub mod error;
pub mod gaussian;
pub mod gibbs;
pub mod lqg;
pub mod rng;
pub mod samplers;
pub mod system;
pub mod systems;

pub use error::{Error, Result};

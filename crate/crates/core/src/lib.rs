//! Spatial Smoluchowski coagulation with convection-diffusion transport.
//!
//! The transport semigroup is estimated by Feynman-Kac Monte Carlo over
//! Euler-Maruyama paths, the mild equation is solved by Picard iteration, and
//! the a-priori bounds (semigroup decay, the small-data comparison curve,
//! positivity) are checked at runtime.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the double-precision instantiation used by the CLI.

pub mod dynamics;
pub mod error;
pub mod exact;
pub mod feynman_kac;
pub mod kernel_field;
pub mod mass_measure;
pub mod reaction;
pub mod rng;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Real;

pub type MassGrid64 = mass_measure::MassGrid<f64>;
pub type BaseMeasure64 = mass_measure::BaseMeasure<f64>;
pub type SpatialGrid64 = kernel_field::SpatialGrid<f64>;
pub type KernelField64 = kernel_field::KernelField<f64>;
pub type McConfig64 = feynman_kac::McConfig<f64>;
pub type DynamicsModel64 = dynamics::DynamicsModel<f64>;
pub type CoagKernel64 = reaction::CoagKernel<f64>;
pub type Reaction64 = reaction::Reaction<f64>;
pub type Trajectory64 = solver::Trajectory<f64>;
pub type SolverConfig64 = solver::SolverConfig<f64>;

//! Score distillation on low-dimensional particle ensembles: noise schedules,
//! analytic and learned score fields, PF-ODE solvers, the SDS/SDI/PFD
//! estimators, distribution metrics and closed-form Gaussian references.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, with `32`-suffixed variants for `f32`.

pub mod distillation;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod scalar;
pub mod schedules;
pub mod score_fields;
pub mod solvers;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Schedule = schedules::NoiseSchedule<f64>;
pub type Mixture = score_fields::GaussianMixture<f64>;
pub type Network = score_fields::ScoreNetwork<f64>;
pub type Ensemble = distillation::ParticleEnsemble<f64>;
pub type Prior = distillation::PriorModel<f64>;
pub type Sample = distillation::GradientSample<f64>;
pub type Path = solvers::Trajectory<f64>;

pub type Schedule32 = schedules::NoiseSchedule<f32>;
pub type Mixture32 = score_fields::GaussianMixture<f32>;
pub type Network32 = score_fields::ScoreNetwork<f32>;
pub type Ensemble32 = distillation::ParticleEnsemble<f32>;
pub type Prior32 = distillation::PriorModel<f32>;

//! Model-based reinforcement learning over families of tasks that differ in
//! hidden parameters.
//!
//! The crate bundles a small reverse-mode differentiation core
//! ([`gradcore`]), Gaussian-head ensemble models ([`models`]), per-task
//! latent variables inferred by stochastic variational inference
//! ([`latent`], [`objective`]), a cross-entropy-method MPC planner
//! ([`planner`]), built-in parametric environments ([`envs`]) and the
//! experiment harness ([`harness`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the harness uses.

pub mod envs;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod latent;
pub mod models;
pub mod objective;
pub mod planner;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default real type.
pub type Real = f64;

pub type Array = gradcore::Array<Real>;
pub type Graph = gradcore::Graph<Real>;
pub type ParamStore = gradcore::ParamStore<Real>;
pub type GradTable = gradcore::GradTable<Real>;
pub type GaussianHeadNet = models::GaussianHeadNet<Real>;
pub type ProbabilisticEnsemble = models::ProbabilisticEnsemble<Real>;
pub type TaskPosterior = latent::TaskPosterior<Real>;
pub type WorldModel = objective::WorldModel<Real>;
pub type TaskData = objective::TaskData<Real>;

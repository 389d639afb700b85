//! Gaussian-head networks and the ensembles built from them.
//!
//! Dynamics nets predict the state delta `Δs` from `(s, a, z)`; reward nets
//! predict `r` from `(s, a, s', z)`. Observed inputs are normalized by
//! dataset statistics; latent inputs are passed through unchanged.

mod ensemble;
mod net;
mod normalizer;

pub(crate) use ensemble::EnsembleState;
pub use ensemble::{
    dyn_forward, dyn_sample, gaussian_log_density_rows, reward_forward, ProbabilisticEnsemble, Role,
};
pub use net::{
    bound_log_var, unbound_log_var, Activation, GaussianHeadNet, InputPart, NetSpec, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use normalizer::{Normalizer, STD_FLOOR};

//! Difference reconstructions: the one-step linear (LD) estimate and the
//! nonlinear joint estimate (MO) with total variation priors.

mod linear;
mod nonlinear;
mod tv;

pub use linear::{
    build_correlation_regularizer, reconstruct_ld, CorrelationRegularizer, LdParams, LdResult, LdSolver,
    DEFAULT_MARGINAL_STD, PRIOR_JITTER,
};
pub use nonlinear::{reconstruct_mo, MoParams, MoResult, RoiMap};
pub use tv::{smoothed_tv, weighted_tv, TvTerm, REL_ETA};

//! Posterior inference for the block-inclusion model.

pub mod effects;
pub mod laplace;
pub mod marginal;
pub mod optimize;
pub mod posterior;

pub use effects::{effect_estimates, marginal_effect, mu_half, write_effects_csv, EffectEstimate};
pub use laplace::{effective_sample_size, fit, systematic_resample, Diagnostics, FitConfig, PosteriorApprox, Proposal};
pub use optimize::{bfgs, BfgsOptions, Minimum};
pub use posterior::{
    gradient, inclusion_from_eta, inclusion_probability, log_posterior, Layout, LogPosterior,
    NaturalParams, Priors, StudentT,
};

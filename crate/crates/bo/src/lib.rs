//! Bayesian optimization of MPC parameters: GP surrogates with SAAS or
//! point-estimate hyperparameters, expected improvement, and the tuning loop.

pub mod acquisition;
pub mod campaign;
pub mod gp;
pub mod nuts;
pub mod saas;
pub mod space;
pub mod vanilla;

pub use acquisition::{expected_improvement, maximize_acquisition, AcquisitionConfig, Surrogate};
pub use campaign::{
    best_so_far, read_journal, run_campaign, CampaignConfig, CampaignOutcome, CampaignReport, EpisodeEvaluator,
    Evaluation, Evaluator, Method, Phase, TrialRecord,
};
pub use gp::{gp_posterior, log_marginal_likelihood, matern52, predict_mixture, GpPosterior, KernelHyperparams, TrialDataset};
pub use nuts::NutsConfig;
pub use saas::{log_posterior_density, sample_hyperparams, PosteriorSamples, SaasPrior};
pub use space::{latin_hypercube, Dimension, ParamSpace, Scale};
pub use vanilla::vanilla_fit;

#[derive(Debug, thiserror::Error)]
pub enum BoError {
    #[error("invalid parameter space: {0}")]
    InvalidSpace(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("kernel matrix is not positive definite even with maximal jitter")]
    Factorization,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sampler failure: {0}")]
    Sampling(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] mpctune_core::sim::SimError),
}

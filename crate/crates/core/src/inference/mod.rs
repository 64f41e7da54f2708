//! Laplace-approximation engine for the latent Gaussian model.
//!
//! A fit runs in two nested loops. The **inner loop**
//! ([`gaussian_approximation`]) finds, at fixed hyperparameters, the Gaussian
//! approximation of the latent posterior: damped Newton iterations on the
//! penalized log-likelihood with the sum-to-zero constraints re-imposed after
//! every solve by conditioning-by-kriging. The **outer loop**
//! ([`optimize_hyperparameters`]) maximizes the resulting approximate log
//! marginal posterior over the internal-scale hyperparameters (log size,
//! logit zero-weight, log precisions, log Matérn parameters) with
//! quasi-Newton steps and finite-difference gradients.
//!
//! [`fit_model`] wires both loops together and reports hyperparameter
//! estimates, per-coefficient Gaussian marginals, the relative-risk table,
//! and WAIC. Hyperparameter uncertainty is either ignored (empirical Bayes,
//! the default) or mixed over a central-composite design of hyperparameter
//! points.

mod fit;
mod gaussian;
mod hyper;
mod latent;

pub use fit::{
    coefficient_marginals, fit_model, rr_report, CoefficientMarginal, FitDiagnostics, FitOptions,
    FitResult, HyperEstimate, Integration, RrRow, WeightedState,
};
pub use gaussian::{gaussian_approximation, LatentState, NewtonOptions};
pub use hyper::{optimize_hyperparameters, HyperMap, HyperOutcome};
pub use latent::{EffectHyper, EffectHyperValues, LatentModel};

use thiserror::Error;

use crate::likelihood::LikelihoodError;
use crate::model::effects::EffectsError;
use crate::model::priors::PriorError;
use crate::model::{DesignError, RandomEffect};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Effects(#[from] EffectsError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("{effect:?} needs {what}")]
    EffectUnsupported {
        effect: RandomEffect,
        what: String,
    },
    #[error("no hyperparameter value supplied for {0:?}")]
    MissingHyper(RandomEffect),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error(
        "Newton iteration did not converge in {iterations} iterations \
         (last step max-norm {last_step:.3e}; recent step norms {trace:?})"
    )]
    NewtonDiverged {
        iterations: usize,
        last_step: f64,
        trace: Vec<f64>,
    },
    #[error("symmetric factorization failed: {0}")]
    Factorization(String),
    #[error(
        "hyperparameter optimization did not converge: gradient max-norm {gradient_norm:.3e} \
         after {iterations} iterations; best log-posterior {best_value:.6} at {best_theta:?}"
    )]
    HyperNonConvergence {
        gradient_norm: f64,
        iterations: usize,
        /// Best (highest) log posterior seen.
        best_value: f64,
        /// Internal-scale hyperparameters at the best point.
        best_theta: Vec<f64>,
    },
}

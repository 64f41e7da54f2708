//! Synthetic-data generation and reference implementations used to check
//! the fast inference path: a generative sampler that round-trips through
//! the real assembly code, a random-walk MCMC sampler over the exact
//! posterior, and adaptive Gauss–Hermite quadrature for low-dimensional
//! densities.

mod generate;
mod mcmc;
mod quadrature;

use thiserror::Error;

pub use generate::{
    generate_panel, moran_statistic, SimulatedData, SimulationConfig, SimulationTruth,
};
pub use mcmc::{mcmc_oracle, McmcOptions, McmcResult};
pub use quadrature::{gauss_hermite, quadrature_oracle, PosteriorMoments};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Design(#[from] crate::model::DesignError),
    #[error(transparent)]
    Effects(#[from] crate::model::EffectsError),
    #[error(transparent)]
    Exposure(#[from] crate::exposure::ExposureError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error("oracle failure: {0}")]
    Oracle(String),
}

//! Spatio-temporal models of summer heat and daily mortality counts.
//!
//! `canicula` implements a complete small-area pipeline:
//!
//! 1. **Exposure engineering** ([`exposure`]): station series → daily values →
//!    area-level fields via Matérn-kriging, percentile trigger temperatures,
//!    extreme-heat / heatwave / humidity indicators, lagged means, and
//!    air-quality / socioeconomic categorization.
//! 2. **Panel assembly** ([`data`]): joins deaths, population offsets and
//!    indicator series into a modelling panel of area × summer-day rows.
//! 3. **Model definition** ([`model`]): fixed-effect design matrices with
//!    reference-category dummy coding and heat interactions, structured
//!    random-effect precision blocks (exchangeable area, random walks over
//!    year and calendar month, Matérn spatial field), and penalized-complexity
//!    priors.
//! 4. **Likelihoods** ([`likelihood`]): Poisson, negative binomial, and
//!    zero-inflated negative binomial observation models with analytic,
//!    Newton-safe derivatives.
//! 5. **Inference** ([`inference`]): empirical-Bayes Laplace approximation of
//!    the latent field with sum-to-zero constraints handled by conditioning,
//!    quasi-Newton hyperparameter optimization, optional central-composite
//!    mixing over the hyperparameter posterior, and relative-risk reporting.
//! 6. **Model comparison** ([`selection`]): WAIC, exposure-lag search, and the
//!    confounding ladder.
//! 7. **Synthetic data and oracles** ([`simulate`]): a generative simulator
//!    that feeds the real exposure/panel code paths, plus MCMC and numerical
//!    quadrature oracles used to validate the Laplace engine.
//!
//! The long-form guide lives in the `book/` directory of the repository and is
//! compiled as doctests through [`guide`].

pub mod data;
pub mod exposure;
pub mod guide;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod math;
pub mod model;
pub mod selection;
pub mod simulate;

//! Penalized-complexity prior densities on internal hyperparameter scales.
//!
//! Precision hyperparameters use the PC prior for a Gaussian effect's
//! precision: an exponential distribution on the standard deviation
//! `sigma = tau^(-1/2)` with rate `lambda = -ln(alpha) / u`, so that
//! `P(sigma > u) = alpha`. The density is returned on the internal
//! `log(tau)` scale with the change-of-variables Jacobian included.
//!
//! The Matérn field uses the joint PC prior for a two-dimensional field:
//! the range has density `lambda_r rho^(-2) exp(-lambda_r / rho)` with
//! `lambda_r = -ln(alpha_range) * range0` (so `P(rho < range0) = alpha_range`)
//! and the marginal standard deviation is exponential with
//! `lambda_s = -ln(alpha_sigma) / sigma0`, independent; both returned on log
//! scales with Jacobians.

use thiserror::Error;

use crate::model::spec::{MaternPriorSettings, PcPrecisionSettings};

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("prior configuration out of domain: {0}")]
    InvalidConfig(String),
    #[error("hyperparameter value kind does not match prior kind")]
    KindMismatch,
}

/// A PC prior configuration for one hyperparameter (or hyperparameter pair).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcPriorConfig {
    Precision { u: f64, alpha: f64 },
    Matern {
        range0_km: f64,
        alpha_range: f64,
        sigma0: f64,
        alpha_sigma: f64,
    },
}

impl PcPriorConfig {
    pub fn from_precision_settings(s: &PcPrecisionSettings) -> Self {
        PcPriorConfig::Precision {
            u: s.u,
            alpha: s.alpha,
        }
    }

    /// Resolve Matérn settings against a concrete fallback range scale
    /// (median inter-centroid distance).
    pub fn from_matern_settings(s: &MaternPriorSettings, default_range0: f64) -> Self {
        PcPriorConfig::Matern {
            range0_km: s.range0_km.unwrap_or(default_range0),
            alpha_range: s.alpha_range,
            sigma0: s.sigma0,
            alpha_sigma: s.alpha_sigma,
        }
    }

    fn validate(&self) -> Result<(), PriorError> {
        match *self {
            PcPriorConfig::Precision { u, alpha } => {
                if u > 0.0 && u.is_finite() && alpha > 0.0 && alpha < 1.0 {
                    Ok(())
                } else {
                    Err(PriorError::InvalidConfig(format!("u = {u}, alpha = {alpha}")))
                }
            }
            PcPriorConfig::Matern {
                range0_km,
                alpha_range,
                sigma0,
                alpha_sigma,
            } => {
                if range0_km > 0.0
                    && range0_km.is_finite()
                    && sigma0 > 0.0
                    && sigma0.is_finite()
                    && alpha_range > 0.0
                    && alpha_range < 1.0
                    && alpha_sigma > 0.0
                    && alpha_sigma < 1.0
                {
                    Ok(())
                } else {
                    Err(PriorError::InvalidConfig(format!("{self:?}")))
                }
            }
        }
    }
}

/// A hyperparameter value on its internal scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperValue {
    LogPrecision(f64),
    Matern { log_sigma: f64, log_range: f64 },
}

/// PC prior log-density for a precision, on the log-precision scale.
pub fn pc_precision_log_density(log_tau: f64, u: f64, alpha: f64) -> f64 {
    let lambda = -alpha.ln() / u;
    let sigma = (-0.5 * log_tau).exp();
    // p(log tau) = lambda exp(-lambda sigma) * |d sigma / d log tau|,
    // and d sigma / d log tau = -sigma / 2.
    lambda.ln() - lambda * sigma + (0.5 * sigma).ln()
}

/// Joint PC prior log-density for the Matérn field on (log sigma, log range).
pub fn pc_matern_log_density(
    log_sigma: f64,
    log_range: f64,
    range0_km: f64,
    alpha_range: f64,
    sigma0: f64,
    alpha_sigma: f64,
) -> f64 {
    let lambda_r = -alpha_range.ln() * range0_km;
    let lambda_s = -alpha_sigma.ln() / sigma0;
    let rho = log_range.exp();
    let sigma = log_sigma.exp();
    // Range: p(rho) = lambda_r rho^-2 exp(-lambda_r / rho); times Jacobian rho.
    let range_part = lambda_r.ln() - 2.0 * rho.ln() - lambda_r / rho + rho.ln();
    // Sd: exponential density times Jacobian sigma.
    let sigma_part = lambda_s.ln() - lambda_s * sigma + sigma.ln();
    range_part + sigma_part
}

/// Dispatching wrapper: evaluate a PC prior at a hyperparameter value.
pub fn pc_prior_log_density(value: &HyperValue, config: &PcPriorConfig) -> Result<f64, PriorError> {
    config.validate()?;
    match (value, config) {
        (&HyperValue::LogPrecision(log_tau), &PcPriorConfig::Precision { u, alpha }) => {
            Ok(pc_precision_log_density(log_tau, u, alpha))
        }
        (
            &HyperValue::Matern {
                log_sigma,
                log_range,
            },
            &PcPriorConfig::Matern {
                range0_km,
                alpha_range,
                sigma0,
                alpha_sigma,
            },
        ) => Ok(pc_matern_log_density(
            log_sigma,
            log_range,
            range0_km,
            alpha_range,
            sigma0,
            alpha_sigma,
        )),
        _ => Err(PriorError::KindMismatch),
    }
}

/// Weak internal-scale Gaussian used for likelihood hyperparameters
/// (log size, logit zero-weight), N(0, 5^2).
pub fn weak_normal_log_density(x: f64) -> f64 {
    const SD: f64 = 5.0;
    -0.5 * (x / SD) * (x / SD) - (SD * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

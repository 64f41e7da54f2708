//! Station-to-area interpolation: a per-day constant-mean Matérn Gaussian
//! process with a nugget, plus pooled maximum-likelihood fitting of the
//! field hyperparameters across days.

use nalgebra::{DMatrix, DVector};

use super::ExposureError;
use crate::math::optim::{bfgs_minimize, BfgsOptions};
use crate::model::effects::{distance, invert_covariance, matern_cov};
use crate::model::MaternParams;

/// Posterior mean and standard deviation of the latent field at one target
/// point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldPrediction {
    pub mean: f64,
    pub sd: f64,
}

/// One day's usable readings of a single variable: station locations (km)
/// and the reduced daily values, index-aligned.
#[derive(Debug, Clone)]
pub struct DayReadings {
    pub locations: Vec<(f64, f64)>,
    pub values: Vec<f64>,
}

fn check_stations(locations: &[(f64, f64)]) -> Result<(), ExposureError> {
    if locations.len() < 3 {
        return Err(ExposureError::TooFewStations(locations.len()));
    }
    for i in 0..locations.len() {
        for j in 0..i {
            if distance(locations[i], locations[j]) < 1e-9 {
                return Err(ExposureError::DuplicateStations(j, i));
            }
        }
    }
    Ok(())
}

fn station_precision(
    locations: &[(f64, f64)],
    params: &MaternParams,
    nugget_sd: f64,
) -> Result<(DMatrix<f64>, f64), ExposureError> {
    let n = locations.len();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = params.sigma * params.sigma + nugget_sd * nugget_sd;
        for j in 0..i {
            let v = matern_cov(distance(locations[i], locations[j]), params);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    invert_covariance(&c).map_err(|e| ExposureError::Factorization(e.to_string()))
}

/// Predict one variable at area centroids from one day's station values.
///
/// The field is a constant-mean Matérn Gaussian process observed at the
/// stations with independent nugget noise; the mean is profiled out by
/// generalized least squares, and the reported variance includes the
/// mean-estimation term, so predictions interpolate the stations exactly as
/// the nugget vanishes.
pub fn predict_daily_field(
    locations: &[(f64, f64)],
    values: &[f64],
    centroids: &[(f64, f64)],
    params: &MaternParams,
    nugget_sd: f64,
) -> Result<Vec<FieldPrediction>, ExposureError> {
    assert_eq!(locations.len(), values.len(), "one value per station");
    assert!(nugget_sd >= 0.0, "nugget sd must be nonnegative");
    assert!(
        values.iter().all(|v| v.is_finite()),
        "missing values must be filtered out before prediction"
    );
    check_stations(locations)?;

    let n = locations.len();
    let (precision, _) = station_precision(locations, params, nugget_sd)?;
    let z = DVector::from_column_slice(values);
    let ones = DVector::from_element(n, 1.0);
    let p_ones = &precision * &ones;
    let denom = ones.dot(&p_ones);
    let mean_hat = p_ones.dot(&z) / denom;
    let resid = &z - DVector::from_element(n, mean_hat);
    let weights = &precision * &resid;

    let sigma2 = params.sigma * params.sigma;
    let mut out = Vec::with_capacity(centroids.len());
    for &c in centroids {
        let k = DVector::from_iterator(
            n,
            locations.iter().map(|&s| matern_cov(distance(c, s), params)),
        );
        let p_k = &precision * &k;
        let mean = mean_hat + k.dot(&weights);
        let mean_term = 1.0 - ones.dot(&p_k);
        let var = (sigma2 - k.dot(&p_k) + mean_term * mean_term / denom).max(0.0);
        out.push(FieldPrediction { mean, sd: var.sqrt() });
    }
    Ok(out)
}

/// Profile log-likelihood of one day under the constant-mean field model.
fn day_log_likelihood(
    day: &DayReadings,
    params: &MaternParams,
    nugget_sd: f64,
) -> Result<f64, ExposureError> {
    let n = day.values.len();
    let (precision, log_det_precision) =
        station_precision(&day.locations, params, nugget_sd)?;
    let z = DVector::from_column_slice(&day.values);
    let ones = DVector::from_element(n, 1.0);
    let p_ones = &precision * &ones;
    let denom = ones.dot(&p_ones);
    let mean_hat = p_ones.dot(&z) / denom;
    let resid = &z - DVector::from_element(n, mean_hat);
    let quad = resid.dot(&(&precision * &resid));
    Ok(-0.5 * (quad - log_det_precision + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Fit the field's marginal standard deviation, range, and nugget by
/// maximizing the profile log-likelihood pooled over days, at fixed
/// smoothness. Returns the fitted parameters and nugget standard deviation.
pub fn fit_field_params(
    days: &[DayReadings],
    smoothness: f64,
) -> Result<(MaternParams, f64), ExposureError> {
    if days.is_empty() {
        return Err(ExposureError::FieldFit("no days to fit".into()));
    }
    for day in days {
        assert_eq!(day.locations.len(), day.values.len(), "one value per station");
        check_stations(&day.locations)?;
        assert!(
            day.values.iter().all(|v| v.is_finite()),
            "missing values must be filtered out before fitting"
        );
    }

    // Moment-based starting point: spread of per-day-centered values and the
    // median pairwise station distance.
    let mut centered = Vec::new();
    for day in days {
        let mean: f64 = day.values.iter().sum::<f64>() / day.values.len() as f64;
        centered.extend(day.values.iter().map(|v| v - mean));
    }
    let pooled_var =
        centered.iter().map(|v| v * v).sum::<f64>() / centered.len().max(1) as f64;
    if pooled_var < 1e-12 {
        return Err(ExposureError::FieldFit(
            "readings are constant within every day; field scale is degenerate".into(),
        ));
    }
    let sigma0 = pooled_var.sqrt();
    let mut dists: Vec<f64> = Vec::new();
    let locs = &days[0].locations;
    for i in 0..locs.len() {
        for j in 0..i {
            dists.push(distance(locs[i], locs[j]));
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let rho0 = dists[dists.len() / 2].max(1e-3);

    let objective = |theta: &DVector<f64>| -> f64 {
        let (log_sigma, log_rho, log_nugget) = (theta[0], theta[1], theta[2]);
        if log_sigma.abs() > 30.0 || log_rho.abs() > 30.0 || log_nugget.abs() > 30.0 {
            return f64::INFINITY;
        }
        let params = MaternParams {
            sigma: log_sigma.exp(),
            range_km: log_rho.exp(),
            smoothness,
        };
        let nugget_sd = log_nugget.exp();
        let mut total = 0.0;
        for day in days {
            match day_log_likelihood(day, &params, nugget_sd) {
                Ok(ll) => total += ll,
                Err(_) => return f64::INFINITY,
            }
        }
        -total
    };

    let x0 = DVector::from_column_slice(&[
        sigma0.ln(),
        rho0.ln(),
        (0.3 * sigma0).max(1e-6).ln(),
    ]);
    let mut f = objective;
    let outcome = bfgs_minimize(
        &mut f,
        x0,
        &BfgsOptions { max_iterations: 80, ..BfgsOptions::default() },
    );
    if !outcome.value.is_finite() {
        return Err(ExposureError::FieldFit(
            "field likelihood is not finite at the fitted point".into(),
        ));
    }
    let params = MaternParams::new(outcome.x[0].exp(), outcome.x[1].exp(), smoothness)
        .map_err(|e| ExposureError::FieldFit(e.to_string()))?;
    Ok((params, outcome.x[2].exp()))
}

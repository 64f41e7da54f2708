//! End-to-end model fitting and reporting.
//!
//! [`fit_model`] optimizes the hyperparameters, solves the Gaussian
//! approximation at the resulting integration point(s), and reduces the
//! weighted mixture of Gaussian states to the quantities reported downstream:
//! per-coefficient marginals, the relative-risk table, and WAIC computed from
//! constrained posterior draws.
//!
//! Hyperparameter uncertainty is handled by [`Integration`]: empirical Bayes
//! plugs in the optimum; the central-composite design mixes the center with
//! `2 s` axial points placed so the mixture reproduces the Gaussian
//! hyperparameter posterior's mean and covariance exactly.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Panel;
use crate::likelihood::FamilyKind;
use crate::math::optim::BfgsOptions;
use crate::math::{interval_z, normal_cdf};
use crate::model::ModelSpec;
use crate::selection::{SelectionError, WaicAccumulator, WaicResult};

use super::gaussian::{newton_laplace, CountData, LatentState, NewtonOptions};
use super::hyper::{optimize_hyperparameters, HyperMap, HyperOutcome};
use super::latent::LatentModel;
use super::InferenceError;

/// Scaling factor of the central-composite axial points.
const CCD_F0: f64 = 1.1;

/// How hyperparameter uncertainty enters the latent marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integration {
    /// Plug in the hyperparameter optimum.
    EmpiricalBayes,
    /// Mix Gaussian states over a central-composite design around the
    /// optimum.
    Ccd,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: FamilyKind,
    pub integration: Integration,
    /// Compute WAIC from posterior draws (skippable, it is the slow tail of
    /// small fits).
    pub compute_waic: bool,
    /// Total posterior draws behind WAIC (allocated to mixture states by
    /// weight, at least one each).
    pub waic_draws: usize,
    pub seed: u64,
    /// Credible-interval level of the relative-risk table.
    pub cri_level: f64,
    /// Gaussian precision of the fixed-effect prior; 0 keeps the improper
    /// flat prior.
    pub fixed_effect_precision: f64,
    /// Outer-loop optimizer settings.
    pub hyper: BfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            family: FamilyKind::Zinb1,
            integration: Integration::EmpiricalBayes,
            compute_waic: true,
            waic_draws: 500,
            seed: 0,
            cri_level: 0.95,
            fixed_effect_precision: 0.0,
            hyper: BfgsOptions {
                max_iterations: 80,
                gradient_tolerance: 2e-3,
                fd_step: 1e-3,
                ..BfgsOptions::default()
            },
        }
    }
}

/// One estimated hyperparameter, on both scales.
#[derive(Debug, Clone)]
pub struct HyperEstimate {
    pub name: String,
    /// Natural-scale value (size, probability, precision, km).
    pub value: f64,
    /// Delta-method natural-scale standard deviation.
    pub sd: f64,
    /// Internal-scale (log / logit) value.
    pub internal: f64,
    pub internal_sd: f64,
}

/// Gaussian marginal of one fixed-effect coefficient.
#[derive(Debug, Clone)]
pub struct CoefficientMarginal {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// One row of the relative-risk table.
#[derive(Debug, Clone)]
pub struct RrRow {
    pub term: String,
    pub rr: f64,
    pub cri_lower: f64,
    pub cri_upper: f64,
    /// Posterior probability that the effect lies on the side of its point
    /// estimate (0.5 = no direction, 1 = certain).
    pub probs: f64,
    /// The marginal had zero spread; the interval is a point.
    pub degenerate: bool,
}

impl RrRow {
    /// Whether the credible interval excludes the null relative risk 1.
    pub fn excludes_unity(&self) -> bool {
        self.cri_lower > 1.0 || self.cri_upper < 1.0
    }
}

/// One Gaussian state of the hyperparameter mixture.
#[derive(Debug, Clone)]
pub struct WeightedState {
    pub weight: f64,
    /// Internal-scale hyperparameters of this state.
    pub theta: DVector<f64>,
    pub state: LatentState,
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    /// Strict convergence of the outer optimizer (loose acceptances run to
    /// completion but report `false` here).
    pub hyper_converged: bool,
    pub hyper_gradient_norm: f64,
    pub hyper_iterations: usize,
    /// Marginal-likelihood evaluations spent by the outer loop.
    pub hyper_evaluations: usize,
    /// Newton iterations of the center-state solve.
    pub newton_iterations: usize,
    /// Largest sum-to-zero violation at the center-state mode.
    pub constraint_residual: f64,
    /// Maximized log posterior of the hyperparameters.
    pub log_posterior: f64,
    pub integration_points: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub hypers: Vec<HyperEstimate>,
    pub coefficients: Vec<CoefficientMarginal>,
    pub rr_table: Vec<RrRow>,
    pub waic: Option<WaicResult>,
    pub diagnostics: FitDiagnostics,
    /// The Gaussian mixture behind the marginals (a single state under
    /// empirical Bayes); the first state is always the optimum.
    pub states: Vec<WeightedState>,
    pub n_fixed: usize,
}

impl FitResult {
    /// The relative-risk row of one term, when present.
    pub fn rr_row(&self, term: &str) -> Option<&RrRow> {
        self.rr_table.iter().find(|r| r.term == term)
    }
}

/// Central-composite integration points: the center carries `1 - 1/f0^2`, and
/// each of the `2 s` axial points — at distance `f0 sqrt(s)` along the
/// columns of the covariance square root — carries an equal share of the
/// rest, which makes the mixture's first two moments match the Gaussian
/// hyperparameter posterior exactly.
fn ccd_points(outcome: &HyperOutcome) -> Vec<(f64, DVector<f64>)> {
    let s = outcome.theta.len();
    if s == 0 {
        return vec![(1.0, outcome.theta.clone())];
    }
    let w0 = 1.0 - 1.0 / (CCD_F0 * CCD_F0);
    let axial_weight = (1.0 - w0) / (2.0 * s as f64);
    let scale = CCD_F0 * (s as f64).sqrt();
    let sqrt = outcome.covariance_sqrt();
    let mut points = vec![(w0, outcome.theta.clone())];
    for j in 0..s {
        let step = sqrt.column(j) * scale;
        points.push((axial_weight, &outcome.theta + &step));
        points.push((axial_weight, &outcome.theta - &step));
    }
    points
}

/// Moment-matched Gaussian marginals of the fixed-effect coefficients under
/// a weighted mixture of Gaussian states: the mixture mean, and the square
/// root of the mixture variance `sum w (sd^2 + mean^2) - mean_mix^2`.
pub fn coefficient_marginals(
    states: &[WeightedState],
    names: &[String],
    n_fixed: usize,
) -> Vec<CoefficientMarginal> {
    let weight_sum: f64 = states.iter().map(|s| s.weight).sum();
    (0..n_fixed)
        .map(|j| {
            let mut mean = 0.0;
            let mut second = 0.0;
            for ws in states {
                let w = ws.weight / weight_sum;
                let m = ws.state.mode[j];
                let sd = ws.state.marginal_sd[j];
                mean += w * m;
                second += w * (sd * sd + m * m);
            }
            CoefficientMarginal {
                name: names[j].clone(),
                mean,
                sd: (second - mean * mean).max(0.0).sqrt(),
            }
        })
        .collect()
}

/// Relative-risk table: `exp` of each non-intercept coefficient marginal,
/// with equal-tailed credible bounds and the posterior probability that the
/// effect lies on the side of its point estimate.
pub fn rr_report(marginals: &[CoefficientMarginal], level: f64) -> Vec<RrRow> {
    let z = interval_z(level);
    marginals
        .iter()
        .filter(|m| m.name != "intercept")
        .map(|m| {
            let rr = m.mean.exp();
            if m.sd > 0.0 {
                RrRow {
                    term: m.name.clone(),
                    rr,
                    cri_lower: (m.mean - z * m.sd).exp(),
                    cri_upper: (m.mean + z * m.sd).exp(),
                    probs: normal_cdf(m.mean.abs() / m.sd),
                    degenerate: false,
                }
            } else {
                RrRow {
                    term: m.name.clone(),
                    rr,
                    cri_lower: rr,
                    cri_upper: rr,
                    probs: 1.0,
                    degenerate: true,
                }
            }
        })
        .collect()
}

fn waic_error(e: SelectionError) -> InferenceError {
    InferenceError::InvalidOption(format!("WAIC accumulation failed: {e}"))
}

/// WAIC over constrained posterior draws from the state mixture, allocating
/// draws to states proportionally to their weights (at least one each).
fn mixture_waic(
    model: &LatentModel,
    map: &HyperMap,
    states: &[WeightedState],
    total_draws: usize,
    seed: u64,
) -> Result<WaicResult, InferenceError> {
    let mut accumulator = WaicAccumulator::new(model.n_rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_count = model.y.iter().copied().max().unwrap_or(0);
    for ws in states {
        let draws = ((ws.weight * total_draws as f64).round() as usize).max(1);
        let cache = map.observation_model(&ws.theta).cached(max_count);
        for _ in 0..draws {
            let field = ws.state.sample(&mut rng);
            let predictors = model.linear_predictors(field.as_slice());
            let log_lik: Vec<f64> = predictors
                .iter()
                .enumerate()
                .map(|(i, &v)| cache.log_lik(model.y[i], v))
                .collect();
            accumulator.push(&log_lik).map_err(waic_error)?;
        }
    }
    accumulator.finish().map_err(waic_error)
}

/// Fit one model to one panel: outer hyperparameter optimization, inner
/// Gaussian approximation at each integration point, and mixture reporting.
pub fn fit_model(
    panel: &Panel,
    spec: &ModelSpec,
    options: &FitOptions,
) -> Result<FitResult, InferenceError> {
    if !(options.cri_level > 0.0 && options.cri_level < 1.0) {
        return Err(InferenceError::InvalidOption(format!(
            "credible level must lie in (0, 1), got {}",
            options.cri_level
        )));
    }
    if options.compute_waic && options.waic_draws < 2 {
        return Err(InferenceError::InvalidOption(format!(
            "WAIC needs at least 2 draws, got {}",
            options.waic_draws
        )));
    }

    let model = LatentModel::build(panel, spec, options.fixed_effect_precision)?;
    let map = HyperMap::new(options.family, &model, spec);
    let outcome = optimize_hyperparameters(&model, &map, &options.hyper)?;

    let covariance = outcome.covariance();
    let hypers: Vec<HyperEstimate> = map
        .names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let internal_sd = covariance[(j, j)].max(0.0).sqrt();
            HyperEstimate {
                name: (*name).to_string(),
                value: map.natural_value(j, outcome.theta[j]),
                sd: map.natural_sd(j, outcome.theta[j], internal_sd),
                internal: outcome.theta[j],
                internal_sd,
            }
        })
        .collect();

    let points = match options.integration {
        Integration::EmpiricalBayes => vec![(1.0, outcome.theta.clone())],
        Integration::Ccd => ccd_points(&outcome),
    };

    let newton = NewtonOptions::default();
    let mut warm: Option<DVector<f64>> = None;
    let mut states = Vec::with_capacity(points.len());
    for (weight, theta) in points {
        let observation = map.observation_model(&theta);
        let hyper_values = model.resolve_hypers(&map.effect_values(&theta))?;
        let prior = model.assemble_prior(&hyper_values)?;
        let data = CountData::new(&observation, &model.y)?;
        let state = newton_laplace(&model, &prior, &data, warm.as_ref(), &newton)?;
        warm = Some(state.mode.clone());
        states.push(WeightedState {
            weight,
            theta,
            state,
        });
    }

    let coefficients =
        coefficient_marginals(&states, model.coefficient_names(), model.n_fixed());
    let rr_table = rr_report(&coefficients, options.cri_level);
    let waic = if options.compute_waic {
        Some(mixture_waic(
            &model,
            &map,
            &states,
            options.waic_draws,
            options.seed,
        )?)
    } else {
        None
    };

    let diagnostics = FitDiagnostics {
        hyper_converged: outcome.converged,
        hyper_gradient_norm: outcome.gradient_norm,
        hyper_iterations: outcome.iterations,
        hyper_evaluations: outcome.evaluations,
        newton_iterations: states[0].state.iterations,
        constraint_residual: states[0].state.constraint_residual,
        log_posterior: outcome.value,
        integration_points: states.len(),
    };

    Ok(FitResult {
        hypers,
        coefficients,
        rr_table,
        waic,
        diagnostics,
        states,
        n_fixed: model.n_fixed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::test_fixtures::{single_area_panel, small_panel};
    use crate::model::{FixedTerm, HeatKind, RandomEffect};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn base_spec(effects: Vec<RandomEffect>) -> ModelSpec {
        ModelSpec::for_heat(HeatKind::ExtremeMaxTemp)
            .with_fixed_terms(vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat])
            .with_random_effects(effects)
    }

    fn marginal(name: &str, mean: f64, sd: f64) -> CoefficientMarginal {
        CoefficientMarginal {
            name: name.into(),
            mean,
            sd,
        }
    }

    /// Reconstruct a Gaussian marginal from a published relative risk and its
    /// 95% interval: mean = ln(rr), sd = ln(hi/lo) / (2 z).
    fn from_published(rr: f64, lo: f64, hi: f64) -> CoefficientMarginal {
        marginal("term", rr.ln(), (hi / lo).ln() / (2.0 * 1.959964))
    }

    #[test]
    fn rr_report_reproduces_published_rows() {
        // Two rows with published probabilities 0.931 and 0.968; the exact
        // values under the pinned z convention are frozen here.
        let rows = rr_report(&[from_published(1.3401, 0.9107, 1.9719)], 0.95);
        assert_relative_eq!(rows[0].rr, 1.3401, epsilon = 1e-12);
        assert_relative_eq!(rows[0].cri_lower, 0.9107148789291165, epsilon = 1e-9);
        assert_relative_eq!(rows[0].cri_upper, 1.971932216712776, epsilon = 1e-9);
        assert_relative_eq!(rows[0].probs, 0.931282161639437, epsilon = 1e-9);
        assert!((rows[0].probs - 0.931).abs() < 5e-4);

        let rows = rr_report(&[from_published(1.0836, 0.9955, 1.1794)], 0.95);
        assert_relative_eq!(rows[0].probs, 0.9683172390591311, epsilon = 1e-9);
        assert!((rows[0].probs - 0.968).abs() < 5e-4);
    }

    #[test]
    fn rr_report_handles_null_and_degenerate_marginals() {
        let rows = rr_report(
            &[
                marginal("intercept", -7.0, 0.1),
                marginal("null_term", 0.0, 0.2),
                marginal("pinned", 0.3, 0.0),
            ],
            0.95,
        );
        // The intercept is not a relative risk.
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].term, "null_term");
        assert_relative_eq!(rows[0].rr, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rows[0].probs, 0.5, epsilon = 1e-12);
        assert!(!rows[0].degenerate);
        // Interval symmetry on the log scale.
        assert_relative_eq!(
            rows[0].cri_lower * rows[0].cri_upper,
            1.0,
            epsilon = 1e-12
        );

        assert!(rows[1].degenerate);
        assert_relative_eq!(rows[1].probs, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rows[1].cri_lower, rows[1].cri_upper, epsilon = 1e-15);

        // A 90% interval is narrower than a 95% one.
        let wide = rr_report(&[marginal("t", 0.1, 0.2)], 0.95);
        let narrow = rr_report(&[marginal("t", 0.1, 0.2)], 0.90);
        assert!(narrow[0].cri_lower > wide[0].cri_lower);
        assert!(narrow[0].cri_upper < wide[0].cri_upper);
    }

    fn synthetic_state(mode: Vec<f64>, sd: Vec<f64>) -> LatentState {
        let n = mode.len();
        LatentState {
            mode: DVector::from_vec(mode),
            marginal_sd: DVector::from_vec(sd),
            log_marginal_likelihood: 0.0,
            log_likelihood: 0.0,
            log_det_precision: 0.0,
            iterations: 1,
            constraint_residual: 0.0,
            chol_l: DMatrix::identity(n, n),
            mu: DVector::zeros(n),
            krige_u: DMatrix::zeros(n, 0),
            groups: vec![],
        }
    }

    #[test]
    fn coefficient_marginals_mix_by_moment_matching() {
        let states = vec![
            WeightedState {
                weight: 0.6,
                theta: DVector::zeros(0),
                state: synthetic_state(vec![1.0, -0.5], vec![0.3, 0.1]),
            },
            WeightedState {
                weight: 0.4,
                theta: DVector::zeros(0),
                state: synthetic_state(vec![2.0, -0.5], vec![0.5, 0.1]),
            },
        ];
        let names = vec!["a".to_string(), "b".to_string()];
        let mix = coefficient_marginals(&states, &names, 2);

        let mean = 0.6 * 1.0 + 0.4 * 2.0;
        let second = 0.6 * (0.09 + 1.0) + 0.4 * (0.25 + 4.0);
        assert_relative_eq!(mix[0].mean, mean, epsilon = 1e-12);
        assert_relative_eq!(mix[0].sd, (second - mean * mean).sqrt(), epsilon = 1e-12);

        // Identical component means: the mixture collapses to the shared
        // moments.
        assert_relative_eq!(mix[1].mean, -0.5, epsilon = 1e-12);
        assert_relative_eq!(mix[1].sd, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn poisson_fit_reports_rates_and_waic() {
        let panel = single_area_panel(2012, 80, 8);
        let spec = base_spec(vec![]);
        let options = FitOptions {
            family: FamilyKind::Poisson,
            waic_draws: 200,
            ..FitOptions::default()
        };
        let fit = fit_model(&panel, &spec, &options).unwrap();

        assert!(fit.hypers.is_empty());
        assert_eq!(fit.coefficients.len(), 2);
        assert_eq!(fit.n_fixed, 2);
        assert_eq!(fit.rr_table.len(), 1);
        assert_eq!(fit.rr_table[0].term, "extreme_heat");
        assert!(fit.rr_row("extreme_heat").is_some());
        assert!(fit.rr_row("intercept").is_none());
        assert!(fit.diagnostics.hyper_converged);
        assert_eq!(fit.diagnostics.integration_points, 1);

        let waic = fit.waic.as_ref().unwrap();
        assert_eq!(waic.draws, 200);
        assert_eq!(waic.observations, 80);
        assert!(waic.waic.is_finite() && waic.p_waic > 0.0);

        // Deterministic under the same seed, sensitive to a different one.
        let again = fit_model(&panel, &spec, &options).unwrap();
        assert_eq!(
            fit.waic.as_ref().unwrap().waic,
            again.waic.as_ref().unwrap().waic
        );
        let other_seed = fit_model(
            &panel,
            &spec,
            &FitOptions {
                seed: 1,
                ..options.clone()
            },
        )
        .unwrap();
        assert_ne!(
            fit.waic.as_ref().unwrap().waic,
            other_seed.waic.as_ref().unwrap().waic
        );
    }

    #[test]
    fn negative_binomial_fit_estimates_hyperparameters() {
        let panel = small_panel(3, &[2012, 2013], 42);
        let spec = base_spec(vec![RandomEffect::AreaIid]);
        let options = FitOptions {
            family: FamilyKind::NegBinomial,
            compute_waic: false,
            ..FitOptions::default()
        };
        let fit = fit_model(&panel, &spec, &options).unwrap();

        assert_eq!(fit.hypers.len(), 2);
        assert_eq!(fit.hypers[0].name, "size");
        assert_eq!(fit.hypers[1].name, "tau_area_iid");
        for h in &fit.hypers {
            assert!(h.value > 0.0 && h.value.is_finite());
            assert!(h.sd > 0.0 && h.sd.is_finite());
            assert_relative_eq!(h.value, h.internal.exp(), epsilon = 1e-12);
        }
        assert!(fit.waic.is_none());
        assert!(fit.diagnostics.constraint_residual < 1e-8);
        assert!(fit.diagnostics.log_posterior.is_finite());
    }

    #[test]
    fn ccd_mixes_axial_states_around_the_optimum() {
        let panel = small_panel(3, &[2012, 2013], 42);
        let spec = base_spec(vec![RandomEffect::AreaIid]);
        let eb = fit_model(
            &panel,
            &spec,
            &FitOptions {
                family: FamilyKind::NegBinomial,
                compute_waic: false,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let ccd = fit_model(
            &panel,
            &spec,
            &FitOptions {
                family: FamilyKind::NegBinomial,
                integration: Integration::Ccd,
                waic_draws: 50,
                ..FitOptions::default()
            },
        )
        .unwrap();

        // 2 hyperparameters: center + 4 axial points.
        assert_eq!(ccd.diagnostics.integration_points, 5);
        assert_eq!(ccd.states.len(), 5);
        let weight_sum: f64 = ccd.states.iter().map(|s| s.weight).sum();
        assert_relative_eq!(weight_sum, 1.0, epsilon = 1e-12);
        // Center first, with the moment-matching weights.
        assert_eq!(ccd.states[0].theta, eb.states[0].theta);
        assert_relative_eq!(ccd.states[0].weight, 1.0 - 1.0 / 1.21, epsilon = 1e-12);
        assert_relative_eq!(ccd.states[1].weight, (1.0 / 1.21) / 4.0, epsilon = 1e-12);
        // Axial points are symmetric around the center.
        let center = &ccd.states[0].theta;
        let plus = &ccd.states[1].theta;
        let minus = &ccd.states[2].theta;
        assert_relative_eq!(
            (plus + minus)[0],
            2.0 * center[0],
            epsilon = 1e-9
        );

        // The mixture stays near the plug-in fit but is not identical.
        let eb_heat = &eb.coefficients[1];
        let ccd_heat = &ccd.coefficients[1];
        assert!((eb_heat.mean - ccd_heat.mean).abs() < 0.5 * eb_heat.sd);
        assert!(ccd_heat.sd > 0.0);

        // WAIC draws spread over the five states, totalling about the
        // requested count (per-state rounding, at least one draw each).
        let draws = ccd.waic.as_ref().unwrap().draws;
        assert!((draws as i64 - 50).abs() <= 5, "draws = {draws}");
    }

    #[test]
    fn invalid_options_are_rejected_up_front() {
        let panel = single_area_panel(2012, 20, 3);
        let spec = base_spec(vec![]);
        let bad_level = FitOptions {
            cri_level: 1.0,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_model(&panel, &spec, &bad_level),
            Err(InferenceError::InvalidOption(_))
        ));
        let bad_draws = FitOptions {
            family: FamilyKind::Poisson,
            waic_draws: 1,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_model(&panel, &spec, &bad_draws),
            Err(InferenceError::InvalidOption(_))
        ));
    }
}

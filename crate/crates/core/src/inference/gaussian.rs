//! Gaussian approximation of the latent posterior at fixed hyperparameters.
//!
//! Damped Newton iterations maximize the penalized log-likelihood
//! `F(u) = sum_i ll_i(eta_i + offset_i) - u' Q u / 2`. Each sweep factors the
//! curvature `Qc = Q + A' C A` (C = negated likelihood curvatures), solves for
//! the unconstrained update, and re-imposes the sum-to-zero constraints by
//! conditioning-by-kriging: `u_c = u - Qc^-1 E' (E Qc^-1 E')^-1 E u`. The
//! iteration stops when the proposed step's max-norm falls below 1e-8 or the
//! projected gradient's max-norm falls below 1e-6.
//!
//! The converged state carries everything later stages need: the constrained
//! mode, constrained marginal variances (Takahashi-style correction of the
//! unconstrained inverse diagonal), the log marginal likelihood of the
//! hyperparameter configuration, and the factor/krige operators used to draw
//! constrained posterior samples.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Panel;
use crate::likelihood::{CachedLikelihood, ObservationModel};
use crate::model::ModelSpec;

use super::latent::{EffectHyperValues, LatentModel, PriorMatrices};
use super::InferenceError;

const LN_2PI: f64 = 1.8378770664093453;

/// Per-row observation terms the Newton engine consumes: log-likelihood and
/// its first two derivatives with respect to the linear predictor.
pub(crate) trait Observation {
    fn log_lik(&self, row: usize, v: f64) -> f64;
    /// `(d1, d2)` with `d2` strictly negative (curvature-safe).
    fn derivatives(&self, row: usize, v: f64) -> (f64, f64);
}

/// Count data evaluated through a cached observation model.
pub(crate) struct CountData<'a> {
    cache: CachedLikelihood,
    y: &'a [u64],
}

impl<'a> CountData<'a> {
    pub fn new(model: &ObservationModel, y: &'a [u64]) -> Result<Self, InferenceError> {
        model.validate()?;
        let max = y.iter().copied().max().unwrap_or(0);
        Ok(CountData {
            cache: model.cached(max),
            y,
        })
    }
}

impl Observation for CountData<'_> {
    fn log_lik(&self, row: usize, v: f64) -> f64 {
        self.cache.log_lik(self.y[row], v)
    }

    fn derivatives(&self, row: usize, v: f64) -> (f64, f64) {
        self.cache.derivatives(self.y[row], v)
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Converged when the proposed step's max-norm falls below this.
    pub step_tolerance: f64,
    /// Converged when the projected gradient's max-norm falls below this.
    pub gradient_tolerance: f64,
    /// Compute constrained marginal variances (skipped inside the
    /// hyperparameter search, where only the marginal likelihood is needed).
    pub compute_marginals: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iterations: 100,
            step_tolerance: 1e-8,
            gradient_tolerance: 1e-6,
            compute_marginals: true,
        }
    }
}

/// Converged Gaussian approximation at one hyperparameter configuration.
#[derive(Debug, Clone)]
pub struct LatentState {
    /// Constrained posterior mode (fixed effects first, then random-effect
    /// segments).
    pub mode: DVector<f64>,
    /// Constrained marginal standard deviations (empty when not requested).
    pub marginal_sd: DVector<f64>,
    /// Laplace-approximate log marginal likelihood of this configuration.
    pub log_marginal_likelihood: f64,
    /// Total observation log-likelihood at the mode.
    pub log_likelihood: f64,
    /// Log-determinant of the constrained-system precision factor.
    pub log_det_precision: f64,
    pub iterations: usize,
    /// Largest absolute sum-to-zero violation across constraint groups.
    pub constraint_residual: f64,
    pub(crate) chol_l: DMatrix<f64>,
    /// Unconstrained Newton mean (the kriging anchor for sampling).
    pub(crate) mu: DVector<f64>,
    /// `U = Qc^-1 E' (E Qc^-1 E')^-1` and the constraint groups.
    pub(crate) krige_u: DMatrix<f64>,
    pub(crate) groups: Vec<Vec<u32>>,
}

impl LatentState {
    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    /// Draw from the constrained Gaussian approximation: an unconstrained
    /// draw around the Newton mean, kriged onto the constraint surface.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut v = self
            .chol_l
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has positive diagonal")
            + &self.mu;
        krige_in_place(&mut v, &self.krige_u, &self.groups);
        v
    }
}

/// `v <- v - U (E v)`: project a vector onto the constraint surface along
/// the kriging directions.
fn krige_in_place(v: &mut DVector<f64>, u: &DMatrix<f64>, groups: &[Vec<u32>]) {
    if groups.is_empty() {
        return;
    }
    let ev = DVector::from_iterator(
        groups.len(),
        groups
            .iter()
            .map(|g| g.iter().map(|&i| v[i as usize]).sum::<f64>()),
    );
    v.gemv(-1.0, u, &ev, 1.0);
}

/// Remove the constraint-normal components of a gradient (each group's mean),
/// leaving the gradient tangent to the constraint surface.
fn project_tangent(g: &mut DVector<f64>, groups: &[Vec<u32>]) {
    for group in groups {
        let mean = group.iter().map(|&i| g[i as usize]).sum::<f64>() / group.len() as f64;
        for &i in group {
            g[i as usize] -= mean;
        }
    }
}

/// Cholesky with escalating relative diagonal jitter (safety net for nearly
/// semidefinite systems at extreme hyperparameter trials).
fn cholesky_with_jitter(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>, InferenceError> {
    let n = m.nrows();
    let mean_diag = m.diagonal().sum() / n as f64;
    let mut jitter = 0.0;
    loop {
        let mut attempt = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok(chol);
        }
        jitter = if jitter == 0.0 {
            mean_diag.abs().max(f64::MIN_POSITIVE) * 1e-10
        } else {
            jitter * 10.0
        };
        if !(jitter < mean_diag.abs() * 1e-5) {
            return Err(InferenceError::Factorization(format!(
                "{what} not positive definite (dimension {n})"
            )));
        }
    }
}

fn log_det_from(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Dense `E'` (latent dimension by constraint count).
fn constraint_columns(groups: &[Vec<u32>], n: usize) -> DMatrix<f64> {
    let mut e_t = DMatrix::zeros(n, groups.len());
    for (g, idx) in groups.iter().enumerate() {
        for &i in idx {
            e_t[(i as usize, g)] = 1.0;
        }
    }
    e_t
}

/// Starting point: zero field with the intercept (when present) set to the
/// pooled log-rate, which keeps the first Poisson/NB curvature close to the
/// data scale.
fn initial_point(model: &LatentModel) -> DVector<f64> {
    let mut u = DVector::zeros(model.dim());
    if let Some(pos) = model
        .coefficient_names()
        .iter()
        .position(|n| n == "intercept")
    {
        let total: f64 = model.y.iter().map(|&y| y as f64).sum();
        let exposure: f64 = (0..model.n_rows()).map(|i| model.offset(i).exp()).sum();
        if exposure > 0.0 {
            u[pos] = ((total + 0.5) / exposure).ln();
        }
    }
    u
}

/// Inner Newton loop; see the module docs. `warm` must satisfy the
/// sum-to-zero constraints (any previously returned mode does).
pub(crate) fn newton_laplace(
    model: &LatentModel,
    prior: &PriorMatrices,
    obs: &dyn Observation,
    warm: Option<&DVector<f64>>,
    opts: &NewtonOptions,
) -> Result<LatentState, InferenceError> {
    let n = model.dim();
    let k = model.n_constraints();
    let n_rows = model.n_rows();
    if n_rows == 0 {
        return Err(InferenceError::InvalidOption("panel has no rows".into()));
    }

    let e_t = constraint_columns(&model.groups, n);
    let mut u = match warm {
        Some(w) if w.len() == n => w.clone(),
        _ => initial_point(model),
    };

    let objective = |u: &DVector<f64>| -> f64 {
        let v = model.linear_predictors(u.as_slice());
        let ll: f64 = v.iter().enumerate().map(|(i, &vi)| obs.log_lik(i, vi)).sum();
        ll - 0.5 * (&prior.q * u).dot(u)
    };
    let mut f_current = objective(&u);
    let mut trace: Vec<f64> = Vec::new();

    for iter in 1..=opts.max_iterations {
        // Curvature and working response at the current point.
        let v = model.linear_predictors(u.as_slice());
        let mut qc = prior.q.clone();
        let mut rhs = DVector::zeros(n);
        for i in 0..n_rows {
            let (d1, d2) = obs.derivatives(i, v[i]);
            let c = -d2;
            let eta = v[i] - model.offset(i);
            let idx = model.row(i);
            let b = d1 + c * eta;
            for &p in idx {
                rhs[p as usize] += b;
                for &q in idx {
                    qc[(p as usize, q as usize)] += c;
                }
            }
        }

        let chol = cholesky_with_jitter(&qc, "Newton system")?;

        // Projected gradient at the current point: grad F = rhs - Qc u.
        let mut grad = &rhs - &qc * &u;
        project_tangent(&mut grad, &model.groups);
        let grad_norm = grad.amax();

        // Unconstrained update, then kriging onto the constraint surface.
        let mu = chol.solve(&rhs);
        let (target, krige_u, log_det_w, v_mat) = if k > 0 {
            let v_mat = chol.solve(&e_t);
            let mut w = DMatrix::zeros(k, k);
            for (g, idx) in model.groups.iter().enumerate() {
                for j in 0..k {
                    w[(g, j)] = idx.iter().map(|&i| v_mat[(i as usize, j)]).sum();
                }
            }
            let w_chol = cholesky_with_jitter(&w, "constraint Gram matrix")?;
            let log_det_w = log_det_from(&w_chol);
            let krige_u = w_chol.solve(&v_mat.transpose()).transpose();
            let mut target = mu.clone();
            krige_in_place(&mut target, &krige_u, &model.groups);
            (target, krige_u, log_det_w, v_mat)
        } else {
            (mu.clone(), DMatrix::zeros(n, 0), 0.0, DMatrix::zeros(n, 0))
        };

        let step_norm = (&target - &u).amax();
        let converged_by_step = step_norm < opts.step_tolerance;
        let converged = converged_by_step || grad_norm < opts.gradient_tolerance;
        if converged {
            let mode = if converged_by_step { target } else { u };
            return finalize(
                model, prior, obs, mode, mu, chol, krige_u, v_mat, log_det_w, iter, opts,
            );
        }

        // Damped acceptance: never let the penalized log-likelihood fall.
        let direction = &target - &u;
        let mut alpha = 1.0;
        loop {
            let candidate = &u + &direction * alpha;
            let f_candidate = objective(&candidate);
            if f_candidate.is_finite()
                && f_candidate >= f_current - 1e-9 * f_current.abs().max(1.0)
            {
                u = candidate;
                f_current = f_candidate;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-6 {
                trace.push(step_norm);
                let recent = trace.iter().rev().take(8).rev().cloned().collect();
                return Err(InferenceError::NewtonDiverged {
                    iterations: iter,
                    last_step: step_norm,
                    trace: recent,
                });
            }
        }
        trace.push(alpha * step_norm);
    }

    let last = trace.last().copied().unwrap_or(f64::NAN);
    let recent = trace.iter().rev().take(8).rev().cloned().collect();
    Err(InferenceError::NewtonDiverged {
        iterations: opts.max_iterations,
        last_step: last,
        trace: recent,
    })
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    model: &LatentModel,
    prior: &PriorMatrices,
    obs: &dyn Observation,
    mode: DVector<f64>,
    mu: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    krige_u: DMatrix<f64>,
    v_mat: DMatrix<f64>,
    log_det_w: f64,
    iterations: usize,
    opts: &NewtonOptions,
) -> Result<LatentState, InferenceError> {
    let n = model.dim();
    let k = model.n_constraints();

    let v = model.linear_predictors(mode.as_slice());
    let log_likelihood: f64 = v.iter().enumerate().map(|(i, &vi)| obs.log_lik(i, vi)).sum();
    let quad = (&prior.q * &mode).dot(&mode);
    let log_det_qc = log_det_from(&chol);

    // Constrained Laplace log marginal likelihood: likelihood and prior
    // density at the mode minus the constrained Gaussian's density at its
    // own mode, all densities taken with respect to Lebesgue measure on the
    // constraint subspace. The dimension bookkeeping pairs (n - k) Gaussian
    // dimensions against the prior's total rank, and `det(E E') = prod m_g`
    // converts between the constraint rows (group indicator vectors, not
    // orthonormal) and subspace coordinates.
    let log_det_ee: f64 = model
        .groups
        .iter()
        .map(|g| (g.len() as f64).ln())
        .sum();
    let log_marginal_likelihood = log_likelihood - 0.5 * quad + 0.5 * prior.log_gdet
        - 0.5 * log_det_qc
        - 0.5 * log_det_w
        + 0.5 * log_det_ee
        + 0.5 * ((n - k) as f64 - prior.rank as f64) * LN_2PI;

    let constraint_residual = model
        .groups
        .iter()
        .map(|g| g.iter().map(|&i| mode[i as usize]).sum::<f64>().abs())
        .fold(0.0, f64::max);

    let marginal_sd = if opts.compute_marginals {
        let cov = chol.inverse();
        DVector::from_fn(n, |i, _| {
            let mut var = cov[(i, i)];
            for j in 0..k {
                var -= krige_u[(i, j)] * v_mat[(i, j)];
            }
            var.max(0.0).sqrt()
        })
    } else {
        DVector::zeros(0)
    };

    Ok(LatentState {
        mode,
        marginal_sd,
        log_marginal_likelihood,
        log_likelihood,
        log_det_precision: log_det_qc,
        iterations,
        constraint_residual,
        chol_l: chol.l(),
        mu,
        krige_u,
        groups: model.groups.clone(),
    })
}

/// Gaussian approximation of the latent posterior for a panel, model
/// specification, observation model, and fixed random-effect
/// hyperparameters. Fixed effects carry the default improper flat prior.
pub fn gaussian_approximation(
    panel: &Panel,
    spec: &ModelSpec,
    observation: &ObservationModel,
    effects: &EffectHyperValues,
) -> Result<LatentState, InferenceError> {
    let model = LatentModel::build(panel, spec, 0.0)?;
    let hypers = model.resolve_hypers(effects)?;
    let prior = model.assemble_prior(&hypers)?;
    let data = CountData::new(observation, &model.y)?;
    newton_laplace(&model, &prior, &data, None, &NewtonOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::test_fixtures::{single_area_panel, small_panel};
    use crate::model::effects::rw1_precision;
    use crate::model::{build_design, FixedTerm, HeatKind, RandomEffect};
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Gaussian pseudo-likelihood: makes the penalized objective exactly
    /// quadratic, so Newton must land on the mode in one step and the
    /// marginal-likelihood formula can be checked in closed form.
    struct GaussianObs {
        z: Vec<f64>,
        s2: f64,
    }

    impl Observation for GaussianObs {
        fn log_lik(&self, row: usize, v: f64) -> f64 {
            let r = self.z[row] - v;
            -0.5 * r * r / self.s2 - 0.5 * (2.0 * std::f64::consts::PI * self.s2).ln()
        }

        fn derivatives(&self, row: usize, v: f64) -> (f64, f64) {
            ((self.z[row] - v) / self.s2, -1.0 / self.s2)
        }
    }

    fn flat_spec(terms: Vec<FixedTerm>, effects: Vec<RandomEffect>) -> crate::model::ModelSpec {
        crate::model::ModelSpec::for_heat(HeatKind::ExtremeMaxTemp)
            .with_fixed_terms(terms)
            .with_random_effects(effects)
    }

    #[test]
    fn gaussian_likelihood_converges_in_one_step_to_exact_posterior() {
        let panel = single_area_panel(2012, 30, 4);
        let spec = flat_spec(
            vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat],
            vec![],
        );
        let model = LatentModel::build(&panel, &spec, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s2 = 0.49;
        let z: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..3.0)).collect();
        let obs = GaussianObs { z: z.clone(), s2 };
        let prior = model.assemble_prior(&[]).unwrap();
        let state =
            newton_laplace(&model, &prior, &obs, None, &NewtonOptions::default()).unwrap();

        // Exact weighted-least-squares posterior.
        let design = build_design(&panel, &spec).unwrap();
        let x = design.to_dense();
        let resid = DVector::from_iterator(
            30,
            z.iter().zip(&design.offset).map(|(&zi, &o)| zi - o),
        );
        let xtx = x.transpose() * &x;
        let beta = xtx.clone().try_inverse().unwrap() * x.transpose() * resid;
        assert!(state.iterations <= 2);
        assert_relative_eq!(state.mode[0], beta[0], epsilon = 1e-9);
        assert_relative_eq!(state.mode[1], beta[1], epsilon = 1e-9);

        // Exact posterior sd: sqrt(diag(s^2 (X'X)^-1)).
        let cov = xtx.clone().try_inverse().unwrap() * s2;
        assert_relative_eq!(state.marginal_sd[0], cov[(0, 0)].sqrt(), epsilon = 1e-9);
        assert_relative_eq!(state.marginal_sd[1], cov[(1, 1)].sqrt(), epsilon = 1e-9);

        // Flat-prior marginal likelihood in closed form:
        // sum ll(mode) - log det(X'X / s^2) / 2 + (p / 2) ln 2pi.
        let ll_mode: f64 = (0..30)
            .map(|i| {
                let v = x.row(i).transpose().dot(&beta) + design.offset[i];
                obs.log_lik(i, v)
            })
            .sum();
        let expected =
            ll_mode - 0.5 * (xtx / s2).determinant().ln() + 0.5 * 2.0 * super::LN_2PI;
        assert_relative_eq!(state.log_marginal_likelihood, expected, epsilon = 1e-8);
    }

    /// One area observed once per year through an intercept plus a
    /// sum-to-zero RW1 over years: every constrained quantity has a closed
    /// form in the eigenbasis of the walk structure.
    #[test]
    fn constrained_marginal_likelihood_matches_closed_form() {
        let m = 6usize;
        let years: Vec<i32> = (2012..2018).collect();
        let tau = 2.3;
        let s2 = 0.37;

        let mut rows = Vec::new();
        for (year_index, &year) in years.iter().enumerate() {
            rows.push(crate::data::PanelRow {
                area_id: "A00".into(),
                date: NaiveDate::from_ymd_opt(year, 7, 1).unwrap(),
                outcome: 1,
                extreme_heat_lagged: 0,
                q4_humidity_lagged: 0,
                pm10_cat: 1,
                no2_cat: 1,
                o3_cat: 1,
                income_q: 1,
                gini_q: 1,
                pct65_q: 1,
                log_offset: 0.0,
                year_index,
                month_index: 1,
                area_index: 0,
            });
        }
        let panel = crate::data::Panel {
            rows,
            area_ids: vec!["A00".into()],
            centroids: vec![(0.0, 0.0)],
            years,
            months: vec![6, 7, 8, 9],
            dropped: 0,
        };
        let mut spec = flat_spec(vec![FixedTerm::Intercept], vec![RandomEffect::YearRw1]);
        spec.use_population_offset = false;

        let model = LatentModel::build(&panel, &spec, 0.0).unwrap();
        assert_eq!(model.dim(), 1 + m);
        assert_eq!(model.n_constraints(), 1);
        let prior = model
            .assemble_prior(&[super::super::latent::EffectHyper::Tau(tau)])
            .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let obs = GaussianObs { z: z.clone(), s2 };
        let state =
            newton_laplace(&model, &prior, &obs, None, &NewtonOptions::default()).unwrap();
        assert!(state.constraint_residual < 1e-8);

        // Eigenbasis of the walk structure: R = V diag(lambda) V', with
        // lambda_1 = 0 and v_1 = 1/sqrt(m). In coordinates c = V2'(u), the
        // intercept decouples (V2 is orthogonal to constants) and each c_i
        // is an independent Gaussian observation problem.
        let r = rw1_precision(m, 1).unwrap().structure;
        let eig = r.clone().symmetric_eigen();
        let mut pairs: Vec<(f64, DVector<f64>)> = (0..m)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let lambdas: Vec<f64> = pairs.iter().skip(1).map(|p| p.0).collect();
        let v2: Vec<&DVector<f64>> = pairs.iter().skip(1).map(|p| &p.1).collect();

        let zv = DVector::from_vec(z.clone());
        let z_bar = zv.mean();
        let b: Vec<f64> = v2.iter().map(|v| v.dot(&zv)).collect();

        // Closed-form marginal likelihood: rotating into the walk eigenbasis,
        // the flat intercept integrates to 1/sqrt(m) and each remaining
        // spectral coordinate is a Gaussian-Gaussian convolution.
        let mut expected = -0.5 * (m as f64).ln();
        for (bi, li) in b.iter().zip(&lambdas) {
            let var = s2 + 1.0 / (tau * li);
            expected += -0.5 * bi * bi / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        }
        assert_relative_eq!(state.log_marginal_likelihood, expected, epsilon = 1e-8);

        // Mode: intercept = mean of z; walk = V2 (I/s2 + tau L)^-1 b / s2.
        assert_relative_eq!(state.mode[0], z_bar, epsilon = 1e-8);
        let mut u_expected = DVector::zeros(m);
        let mut u_var_expected = DVector::<f64>::zeros(m);
        for ((bi, li), vi) in b.iter().zip(&lambdas).zip(&v2) {
            let post_prec = 1.0 / s2 + tau * li;
            u_expected += *vi * (bi / s2 / post_prec);
            for j in 0..m {
                u_var_expected[j] += vi[j] * vi[j] / post_prec;
            }
        }
        for j in 0..m {
            assert_relative_eq!(state.mode[1 + j], u_expected[j], epsilon = 1e-8);
            assert_relative_eq!(
                state.marginal_sd[1 + j],
                u_var_expected[j].sqrt(),
                epsilon = 1e-8
            );
        }
        // Intercept variance: s2/m from the decoupled mean coordinate.
        assert_relative_eq!(state.marginal_sd[0], (s2 / m as f64).sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn poisson_intercept_only_mode_is_pooled_log_rate() {
        let panel = single_area_panel(2012, 60, 3);
        let spec = flat_spec(vec![FixedTerm::Intercept], vec![]);
        let state = gaussian_approximation(
            &panel,
            &spec,
            &ObservationModel::Poisson,
            &EffectHyperValues::default(),
        )
        .unwrap();
        let total: f64 = panel.rows.iter().map(|r| r.outcome as f64).sum();
        let exposure: f64 = panel.rows.iter().map(|r| r.log_offset.exp()).sum();
        assert_relative_eq!(state.mode[0], (total / exposure).ln(), epsilon = 1e-7);
    }

    #[test]
    fn doubling_offsets_shifts_only_the_intercept() {
        let panel = single_area_panel(2012, 80, 8);
        let spec = flat_spec(vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat], vec![]);
        let base = gaussian_approximation(
            &panel,
            &spec,
            &ObservationModel::Poisson,
            &EffectHyperValues::default(),
        )
        .unwrap();

        let mut doubled = panel.clone();
        for row in &mut doubled.rows {
            row.log_offset += std::f64::consts::LN_2;
        }
        let shifted = gaussian_approximation(
            &doubled,
            &spec,
            &ObservationModel::Poisson,
            &EffectHyperValues::default(),
        )
        .unwrap();
        assert_relative_eq!(
            shifted.mode[0],
            base.mode[0] - std::f64::consts::LN_2,
            epsilon = 1e-7
        );
        assert_relative_eq!(shifted.mode[1], base.mode[1], epsilon = 1e-7);
    }

    #[test]
    fn full_model_state_satisfies_constraints_and_samples_track_marginals() {
        let panel = small_panel(4, &[2012, 2013], 21);
        let spec = flat_spec(
            vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat],
            RandomEffect::all(),
        );
        let state = gaussian_approximation(
            &panel,
            &spec,
            &ObservationModel::NegBinomial { size: 3.0 },
            &EffectHyperValues {
                iid_tau: Some(6.0),
                matern_sigma: Some(0.4),
                matern_range_km: Some(40.0),
                year_tau: Some(12.0),
                month_tau: Some(9.0),
            },
        )
        .unwrap();
        assert!(state.constraint_residual < 1e-8);
        assert!(state.log_marginal_likelihood.is_finite());

        // Constrained draws stay on the constraint surface and reproduce the
        // reported marginal standard deviations.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_draws = 4000;
        let mut sums = DVector::<f64>::zeros(state.dim());
        let mut sq = DVector::<f64>::zeros(state.dim());
        for _ in 0..n_draws {
            let v = state.sample(&mut rng);
            for g in &state.groups {
                let s: f64 = g.iter().map(|&i| v[i as usize]).sum();
                assert!(s.abs() < 1e-8, "constraint violated in sample: {s}");
            }
            sums += &v;
            sq += v.component_mul(&v);
        }
        let inv = 1.0 / n_draws as f64;
        for i in 0..state.dim() {
            let mean = sums[i] * inv;
            let var = sq[i] * inv - mean * mean;
            let sd = state.marginal_sd[i];
            if sd > 1e-6 {
                assert_relative_eq!(var.sqrt(), sd, max_relative = 0.08);
            }
        }
    }

    #[test]
    fn zero_inflated_counts_fit_without_divergence() {
        let panel = single_area_panel(2013, 100, 12);
        let spec = flat_spec(vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat], vec![]);
        let state = gaussian_approximation(
            &panel,
            &spec,
            &ObservationModel::Zinb1 {
                size: 1.5,
                zero_weight: 0.6,
            },
            &EffectHyperValues::default(),
        )
        .unwrap();
        assert!(state.iterations < 50);
        assert!(state.log_marginal_likelihood.is_finite());
        assert!(state.marginal_sd.iter().all(|s| *s > 0.0));
    }
}

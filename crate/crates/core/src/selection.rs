//! Model comparison: WAIC, exposure-lag search, and the sequential
//! confounding ladder.

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Panel, PanelRow};
use crate::inference::{fit_model, FitOptions, InferenceError, RrRow};
use crate::model::{FixedTerm, ModelSpec};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("WAIC needs at least 2 posterior draws, got {0}")]
    TooFewDraws(usize),
    #[error("WAIC needs at least 1 observation")]
    NoObservations,
    #[error("draw {draw} has {got} log-likelihood entries, expected {expected}")]
    RaggedDraw {
        draw: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite log-likelihood in draw {draw}, observation {observation}")]
    NonFiniteLogLik { draw: usize, observation: usize },
    #[error("lag search needs at least one candidate lag")]
    EmptyLagSet,
    #[error("no candidate lag produced a successful fit")]
    NoSuccessfulFit,
    #[error("the shared lag window is empty: no (area, day) survives every candidate lag")]
    EmptyLagWindow,
}

/// WAIC decomposition. Lower `waic` means better expected predictive
/// accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaicResult {
    pub waic: f64,
    /// Effective number of parameters: summed posterior variances of the
    /// pointwise log-likelihoods.
    pub p_waic: f64,
    /// Log pointwise predictive density.
    pub lppd: f64,
    pub draws: usize,
    pub observations: usize,
}

/// Streaming WAIC state: one pass over posterior draws, O(observations)
/// memory. Per observation it tracks a running log-sum-exp (for lppd) and
/// Welford mean/M2 (for the sample variance with divisor `draws - 1`).
#[derive(Debug, Clone)]
pub struct WaicAccumulator {
    draws: usize,
    /// Per observation: running max of ll.
    max_ll: Vec<f64>,
    /// Per observation: sum of exp(ll - max_ll).
    sum_exp: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WaicAccumulator {
    pub fn new(observations: usize) -> Self {
        WaicAccumulator {
            draws: 0,
            max_ll: vec![f64::NEG_INFINITY; observations],
            sum_exp: vec![0.0; observations],
            mean: vec![0.0; observations],
            m2: vec![0.0; observations],
        }
    }

    pub fn observations(&self) -> usize {
        self.mean.len()
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    /// Fold in one posterior draw's pointwise log-likelihood vector.
    pub fn push(&mut self, log_lik: &[f64]) -> Result<(), SelectionError> {
        if log_lik.len() != self.observations() {
            return Err(SelectionError::RaggedDraw {
                draw: self.draws,
                got: log_lik.len(),
                expected: self.observations(),
            });
        }
        for (i, &ll) in log_lik.iter().enumerate() {
            if !ll.is_finite() {
                return Err(SelectionError::NonFiniteLogLik {
                    draw: self.draws,
                    observation: i,
                });
            }
            if ll > self.max_ll[i] {
                // Rescale the accumulated sum to the new reference point.
                self.sum_exp[i] = self.sum_exp[i] * (self.max_ll[i] - ll).exp() + 1.0;
                self.max_ll[i] = ll;
            } else {
                self.sum_exp[i] += (ll - self.max_ll[i]).exp();
            }
            let delta = ll - self.mean[i];
            self.mean[i] += delta / (self.draws + 1) as f64;
            self.m2[i] += delta * (ll - self.mean[i]);
        }
        self.draws += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<WaicResult, SelectionError> {
        if self.observations() == 0 {
            return Err(SelectionError::NoObservations);
        }
        if self.draws < 2 {
            return Err(SelectionError::TooFewDraws(self.draws));
        }
        let s = self.draws as f64;
        let mut lppd = 0.0;
        let mut p_waic = 0.0;
        for i in 0..self.observations() {
            lppd += self.max_ll[i] + (self.sum_exp[i] / s).ln();
            p_waic += self.m2[i] / (s - 1.0);
        }
        Ok(WaicResult {
            waic: -2.0 * (lppd - p_waic),
            p_waic,
            lppd,
            draws: self.draws,
            observations: self.observations(),
        })
    }
}

/// WAIC from a draws-by-observations matrix of pointwise log-likelihoods
/// (`draws[s][i]` = log-likelihood of observation `i` under posterior draw
/// `s`).
pub fn waic(draws: &[Vec<f64>]) -> Result<WaicResult, SelectionError> {
    if draws.is_empty() {
        return Err(SelectionError::TooFewDraws(0));
    }
    let mut acc = WaicAccumulator::new(draws[0].len());
    for row in draws {
        acc.push(row)?;
    }
    acc.finish()
}

/// WAICs closer than this are a tie; ties resolve to the smaller lag.
pub const WAIC_TIE_TOLERANCE: f64 = 1e-9;

/// One fitted candidate lag.
#[derive(Debug, Clone)]
pub struct LagWaicRow {
    pub lag: u32,
    pub waic: f64,
    pub p_waic: f64,
    pub lppd: f64,
    /// Rows the fit consumed (identical across the search by construction).
    pub rows: usize,
}

/// A candidate lag whose panel build or model fit failed; the search
/// continues over the remaining lags.
#[derive(Debug, Clone)]
pub struct LagFailure {
    pub lag: u32,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LagSearchResult {
    pub best_lag: u32,
    /// Another candidate's WAIC was within [`WAIC_TIE_TOLERANCE`] of the
    /// winner's.
    pub tie: bool,
    /// One row per successfully fitted lag, ascending by lag.
    pub table: Vec<LagWaicRow>,
    pub failures: Vec<LagFailure>,
    /// Size of the shared (area, day) window every fit was restricted to.
    pub rows_used: usize,
}

fn best_row(table: &[LagWaicRow]) -> (u32, bool) {
    let min = table.iter().map(|r| r.waic).fold(f64::INFINITY, f64::min);
    let mut near = table.iter().filter(|r| r.waic - min <= WAIC_TIE_TOLERANCE);
    let best = near.next().expect("nonempty table").lag;
    (best, near.next().is_some())
}

/// Pick the exposure lag by WAIC.
///
/// `build` assembles the panel for one candidate spec (the lag changes both
/// indicator alignment and which leading days survive the window rule).
/// Because each lag drops a different set of rows, every panel is restricted
/// to the intersection of retained (area, day) keys before fitting so the
/// WAICs compare like with like. Candidates whose build or fit fails are
/// reported in `failures` and skipped. Fits run in parallel; the result
/// depends only on inputs and `options.seed`.
pub fn lag_search<F>(
    build: F,
    template: &ModelSpec,
    lags: &[u32],
    options: &FitOptions,
) -> Result<LagSearchResult, SelectionError>
where
    F: Fn(&ModelSpec) -> Result<Panel, DataError>,
{
    if lags.is_empty() {
        return Err(SelectionError::EmptyLagSet);
    }
    if options.waic_draws < 2 {
        return Err(SelectionError::TooFewDraws(options.waic_draws));
    }
    let mut grid: Vec<u32> = lags.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let mut failures = Vec::new();
    let mut built: Vec<(u32, ModelSpec, Panel)> = Vec::new();
    for &lag in &grid {
        let spec = template.clone().with_lag(lag);
        match spec.validate() {
            Ok(()) => match build(&spec) {
                Ok(panel) => built.push((lag, spec, panel)),
                Err(e) => failures.push(LagFailure {
                    lag,
                    message: e.to_string(),
                }),
            },
            Err(e) => failures.push(LagFailure {
                lag,
                message: e.to_string(),
            }),
        }
    }
    if built.is_empty() {
        return Err(SelectionError::NoSuccessfulFit);
    }

    let mut shared = built[0].2.row_keys();
    for (_, _, panel) in &built[1..] {
        let keys = panel.row_keys();
        shared.retain(|k| keys.contains(k));
    }
    if shared.is_empty() {
        return Err(SelectionError::EmptyLagWindow);
    }
    let jobs: Vec<(u32, ModelSpec, Panel)> = built
        .into_iter()
        .map(|(lag, spec, panel)| (lag, spec, panel.restrict_to(&shared)))
        .collect();
    for (lag, _, panel) in &jobs {
        assert_eq!(
            panel.rows.len(),
            shared.len(),
            "lag {lag} fit escaped the shared row window"
        );
    }

    let fits: Vec<(u32, Result<crate::inference::FitResult, InferenceError>)> = jobs
        .par_iter()
        .map(|(lag, spec, panel)| {
            let mut opts = options.clone();
            opts.compute_waic = true;
            // Decorrelate the WAIC Monte-Carlo noise across candidates.
            opts.seed = options
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(u64::from(*lag) + 1));
            (*lag, fit_model(panel, spec, &opts))
        })
        .collect();

    let mut table = Vec::new();
    for (lag, outcome) in fits {
        match outcome {
            Ok(fit) => {
                let w = fit.waic.expect("lag fits always request WAIC");
                table.push(LagWaicRow {
                    lag,
                    waic: w.waic,
                    p_waic: w.p_waic,
                    lppd: w.lppd,
                    rows: w.observations,
                });
            }
            Err(e) => failures.push(LagFailure {
                lag,
                message: e.to_string(),
            }),
        }
    }
    if table.is_empty() {
        return Err(SelectionError::NoSuccessfulFit);
    }
    table.sort_by_key(|r| r.lag);
    failures.sort_by_key(|f| f.lag);
    let (best_lag, tie) = best_row(&table);
    Ok(LagSearchResult {
        best_lag,
        tie,
        table,
        failures,
        rows_used: shared.len(),
    })
}

/// The ladder sequence: the covariate each step adds on top of
/// intercept + extreme heat.
const LADDER_STEPS: [(&str, Option<FixedTerm>); 8] = [
    ("heat-only", None),
    ("+O3", Some(FixedTerm::O3Categories)),
    ("+NO2", Some(FixedTerm::No2Categories)),
    ("+PM10", Some(FixedTerm::Pm10Categories)),
    ("+humidity", Some(FixedTerm::Q4Humidity)),
    ("+income", Some(FixedTerm::IncomeQuartiles)),
    ("+gini", Some(FixedTerm::GiniQuartiles)),
    ("+pct65", Some(FixedTerm::Pct65Quartiles)),
];

/// One rung of the confounding ladder.
#[derive(Debug, Clone)]
pub struct LadderStep {
    pub name: &'static str,
    /// The spec this step fitted (cumulative main effects; outcome, lag, and
    /// random effects shared with the base).
    pub spec: ModelSpec,
    /// The extreme-heat coefficient's relative-risk row.
    pub heat: RrRow,
}

/// How the heat association behaved as covariates entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderVerdict {
    /// The interval excluded 1 with heat alone but covered it once ozone
    /// entered: the association is fully confounded by ozone.
    FullyConfounded,
    /// The interval excluded 1 both with heat alone and with ozone adjusted.
    Persistent,
    /// The heat-only interval already covered 1.
    NeverSignificant,
}

impl LadderVerdict {
    pub fn describe(self) -> &'static str {
        match self {
            LadderVerdict::FullyConfounded => {
                "fully confounded: the heat interval excludes 1 alone but not once ozone enters"
            }
            LadderVerdict::Persistent => {
                "persistent: the heat interval excludes 1 both alone and with ozone adjusted"
            }
            LadderVerdict::NeverSignificant => {
                "no marginal association: the heat-only interval already covers 1"
            }
        }
    }
}

impl std::fmt::Display for LadderVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.describe())
    }
}

/// Classify the ladder from the heat rows of the first step and the +O3
/// step.
pub fn ladder_verdict(heat_only: &RrRow, with_o3: &RrRow) -> LadderVerdict {
    match (heat_only.excludes_unity(), with_o3.excludes_unity()) {
        (true, false) => LadderVerdict::FullyConfounded,
        (true, true) => LadderVerdict::Persistent,
        (false, _) => LadderVerdict::NeverSignificant,
    }
}

#[derive(Debug, Clone)]
pub struct LadderResult {
    /// All eight steps, in ladder order.
    pub steps: Vec<LadderStep>,
    pub verdict: LadderVerdict,
}

#[derive(Debug, Error)]
pub enum LadderError {
    #[error(
        "panel has no variation in {covariate:?}; assemble it with every ladder covariate present"
    )]
    ConstantCovariate { covariate: FixedTerm },
    #[error("ladder step {index} ({step}) failed after {} completed steps: {source}", completed.len())]
    StepFailed {
        step: &'static str,
        index: usize,
        /// The steps that did complete, in order, so a partial table can
        /// still be reported.
        completed: Vec<LadderStep>,
        source: InferenceError,
    },
}

fn covariate_value(term: FixedTerm, row: &PanelRow) -> Option<u8> {
    match term {
        FixedTerm::ExtremeHeat => Some(row.extreme_heat_lagged),
        FixedTerm::Q4Humidity => Some(row.q4_humidity_lagged),
        FixedTerm::Pm10Categories => Some(row.pm10_cat),
        FixedTerm::No2Categories => Some(row.no2_cat),
        FixedTerm::O3Categories => Some(row.o3_cat),
        FixedTerm::IncomeQuartiles => Some(row.income_q),
        FixedTerm::GiniQuartiles => Some(row.gini_q),
        FixedTerm::Pct65Quartiles => Some(row.pct65_q),
        _ => None,
    }
}

fn has_variation(panel: &Panel, term: FixedTerm) -> bool {
    let mut values = panel.rows.iter().filter_map(|r| covariate_value(term, r));
    match values.next() {
        None => false,
        Some(first) => values.any(|v| v != first),
    }
}

/// Run the eight-step confounding ladder on one panel.
///
/// Step 1 fits intercept + extreme heat with the base spec's random effects;
/// each later step adds one main-effect covariate (pollutants first, then
/// socioeconomic quartiles). Every step reports the heat term's relative-risk
/// row, and the verdict compares step 1 against the +O3 step. The panel must
/// have been assembled with every ladder covariate present (constant columns
/// are rejected up front) and under the same lag and heat kind as `base`.
/// Step fits run in parallel; a failure aborts with the completed prefix.
pub fn confounding_ladder(
    panel: &Panel,
    base: &ModelSpec,
    options: &FitOptions,
) -> Result<LadderResult, LadderError> {
    let mut checked = vec![FixedTerm::ExtremeHeat];
    checked.extend(LADDER_STEPS.iter().filter_map(|(_, t)| *t));
    for term in checked {
        if !has_variation(panel, term) {
            return Err(LadderError::ConstantCovariate { covariate: term });
        }
    }

    let mut terms = vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat];
    let mut jobs: Vec<(&'static str, ModelSpec)> = Vec::with_capacity(LADDER_STEPS.len());
    for (name, added) in LADDER_STEPS {
        if let Some(term) = added {
            terms.push(term);
        }
        jobs.push((name, base.clone().with_fixed_terms(terms.clone())));
    }

    // The ladder reports relative risks only, so skip the WAIC draws.
    let mut opts = options.clone();
    opts.compute_waic = false;

    let fitted: Vec<Result<LadderStep, InferenceError>> = jobs
        .par_iter()
        .map(|(name, spec)| {
            fit_model(panel, spec, &opts).map(|fit| LadderStep {
                name,
                spec: spec.clone(),
                heat: fit
                    .rr_row("extreme_heat")
                    .expect("every ladder step includes the heat term")
                    .clone(),
            })
        })
        .collect();

    let mut steps = Vec::with_capacity(LADDER_STEPS.len());
    for (index, outcome) in fitted.into_iter().enumerate() {
        match outcome {
            Ok(step) => steps.push(step),
            Err(source) => {
                return Err(LadderError::StepFailed {
                    step: LADDER_STEPS[index].0,
                    index,
                    completed: steps,
                    source,
                })
            }
        }
    }
    let verdict = ladder_verdict(&steps[0].heat, &steps[1].heat);
    Ok(LadderResult { steps, verdict })
}

//! Declarative model specification: outcome stratum, heat definition and lag,
//! fixed-effect terms, random effects, and prior settings. Serializable to
//! and from TOML with unknown keys rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("lag must be at least 1 day, got {0}")]
    NonPositiveLag(u32),
    #[error("fixed term {0:?} appears more than once")]
    DuplicateTerm(FixedTerm),
    #[error("random effect {0:?} appears more than once")]
    DuplicateEffect(RandomEffect),
    #[error("the intercept term is required")]
    MissingIntercept,
    #[error("interaction {interaction:?} requires main effect {requires:?}")]
    OrphanInteraction {
        interaction: FixedTerm,
        requires: FixedTerm,
    },
    #[error("prior parameter out of domain: {0}")]
    InvalidPrior(String),
}

/// Which death count a panel models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStratum {
    All,
    Age65Plus,
    Age85Plus,
}

/// The heat exposure definition: single-day temperature extremes (default
/// lag 7) or multi-day heatwaves (default lag 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatKind {
    ExtremeMaxTemp,
    Heatwave,
}

impl HeatKind {
    pub fn default_lag(self) -> u32 {
        match self {
            HeatKind::ExtremeMaxTemp => 7,
            HeatKind::Heatwave => 3,
        }
    }
}

/// Fixed-effect blocks in the canonical linear-predictor order. Categorical
/// blocks expand to one dummy column per non-reference level; interaction
/// blocks multiply the heat indicator into those dummies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedTerm {
    Intercept,
    ExtremeHeat,
    Q4Humidity,
    Pm10Categories,
    No2Categories,
    O3Categories,
    IncomeQuartiles,
    GiniQuartiles,
    Pct65Quartiles,
    HeatNo2,
    HeatO3,
    HeatPm10,
    HeatHumidity,
    HeatIncome,
    HeatGini,
    HeatPct65,
}

impl FixedTerm {
    /// The full term list of the reference model (every main effect and
    /// every heat interaction).
    pub fn full_set() -> Vec<FixedTerm> {
        use FixedTerm::*;
        vec![
            Intercept,
            ExtremeHeat,
            Q4Humidity,
            Pm10Categories,
            No2Categories,
            O3Categories,
            IncomeQuartiles,
            GiniQuartiles,
            Pct65Quartiles,
            HeatNo2,
            HeatO3,
            HeatPm10,
            HeatHumidity,
            HeatIncome,
            HeatGini,
            HeatPct65,
        ]
    }

    /// For interaction blocks, the non-heat main effect they require.
    pub fn interaction_parent(self) -> Option<FixedTerm> {
        use FixedTerm::*;
        match self {
            HeatNo2 => Some(No2Categories),
            HeatO3 => Some(O3Categories),
            HeatPm10 => Some(Pm10Categories),
            HeatHumidity => Some(Q4Humidity),
            HeatIncome => Some(IncomeQuartiles),
            HeatGini => Some(GiniQuartiles),
            HeatPct65 => Some(Pct65Quartiles),
            _ => None,
        }
    }

    pub fn is_interaction(self) -> bool {
        self.interaction_parent().is_some()
    }
}

/// Random-effect blocks, in canonical latent-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffect {
    /// Exchangeable (IID) area effect.
    AreaIid,
    /// Matérn Gaussian field evaluated at area centroids.
    AreaMatern,
    /// RW1 over years, one replicate per area, shared precision,
    /// sum-to-zero per replicate.
    YearRw1,
    /// Cyclic RW1 over the four summer months, one replicate per area,
    /// shared precision, sum-to-zero per replicate.
    MonthCyclicRw1,
}

impl RandomEffect {
    pub fn all() -> Vec<RandomEffect> {
        vec![
            RandomEffect::AreaIid,
            RandomEffect::AreaMatern,
            RandomEffect::YearRw1,
            RandomEffect::MonthCyclicRw1,
        ]
    }
}

/// Penalized-complexity prior settings for one precision hyperparameter:
/// P(sd > u) = alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcPrecisionSettings {
    pub u: f64,
    pub alpha: f64,
}

impl Default for PcPrecisionSettings {
    fn default() -> Self {
        PcPrecisionSettings { u: 1.0, alpha: 0.01 }
    }
}

/// Joint PC prior settings for the Matérn field: P(range < range0) =
/// alpha_range and P(sd > sigma0) = alpha_sigma. A missing `range0_km`
/// resolves to the median inter-centroid distance of the panel being fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternPriorSettings {
    pub range0_km: Option<f64>,
    pub alpha_range: f64,
    pub sigma0: f64,
    pub alpha_sigma: f64,
}

impl Default for MaternPriorSettings {
    fn default() -> Self {
        MaternPriorSettings {
            range0_km: None,
            alpha_range: 0.5,
            sigma0: 1.0,
            alpha_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    pub area_iid: PcPrecisionSettings,
    pub year_rw1: PcPrecisionSettings,
    pub month_cyclic_rw1: PcPrecisionSettings,
    pub matern: MaternPriorSettings,
}

fn default_true() -> bool {
    true
}

fn default_smoothness() -> f64 {
    1.0
}

/// Full model specification. The default is the reference extreme-heat model:
/// all fixed terms, all four random effects, lag 7, population offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub outcome: OutcomeStratum,
    pub heat: HeatKind,
    /// Exposure lag in days: indicators enter at day t - lag, pollutant
    /// means over days t - lag .. t - 1.
    pub lag: u32,
    pub fixed_terms: Vec<FixedTerm>,
    pub random_effects: Vec<RandomEffect>,
    #[serde(default)]
    pub priors: PriorSettings,
    /// Matérn smoothness held fixed (not estimated).
    #[serde(default = "default_smoothness")]
    pub matern_smoothness: f64,
    /// Include ln(population) as the offset.
    #[serde(default = "default_true")]
    pub use_population_offset: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::for_heat(HeatKind::ExtremeMaxTemp)
    }
}

impl ModelSpec {
    /// The reference full model for the given heat definition, with that
    /// definition's default lag.
    pub fn for_heat(heat: HeatKind) -> Self {
        ModelSpec {
            outcome: OutcomeStratum::All,
            heat,
            lag: heat.default_lag(),
            fixed_terms: FixedTerm::full_set(),
            random_effects: RandomEffect::all(),
            priors: PriorSettings::default(),
            matern_smoothness: 1.0,
            use_population_offset: true,
        }
    }

    /// Replace the fixed-term list (used by the confounding ladder).
    pub fn with_fixed_terms(mut self, terms: Vec<FixedTerm>) -> Self {
        self.fixed_terms = terms;
        self
    }

    pub fn with_lag(mut self, lag: u32) -> Self {
        self.lag = lag;
        self
    }

    pub fn with_random_effects(mut self, effects: Vec<RandomEffect>) -> Self {
        self.random_effects = effects;
        self
    }

    pub fn has_effect(&self, effect: RandomEffect) -> bool {
        self.random_effects.contains(&effect)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.lag == 0 {
            return Err(SpecError::NonPositiveLag(self.lag));
        }
        let mut seen = Vec::new();
        for &term in &self.fixed_terms {
            if seen.contains(&term) {
                return Err(SpecError::DuplicateTerm(term));
            }
            seen.push(term);
        }
        if !seen.contains(&FixedTerm::Intercept) {
            return Err(SpecError::MissingIntercept);
        }
        for &term in &self.fixed_terms {
            if let Some(parent) = term.interaction_parent() {
                if !seen.contains(&FixedTerm::ExtremeHeat) {
                    return Err(SpecError::OrphanInteraction {
                        interaction: term,
                        requires: FixedTerm::ExtremeHeat,
                    });
                }
                if !seen.contains(&parent) {
                    return Err(SpecError::OrphanInteraction {
                        interaction: term,
                        requires: parent,
                    });
                }
            }
        }
        let mut eff_seen = Vec::new();
        for &e in &self.random_effects {
            if eff_seen.contains(&e) {
                return Err(SpecError::DuplicateEffect(e));
            }
            eff_seen.push(e);
        }
        for (label, pc) in [
            ("area_iid", self.priors.area_iid),
            ("year_rw1", self.priors.year_rw1),
            ("month_cyclic_rw1", self.priors.month_cyclic_rw1),
        ] {
            if !(pc.u > 0.0 && pc.u.is_finite()) || !(pc.alpha > 0.0 && pc.alpha < 1.0) {
                return Err(SpecError::InvalidPrior(format!(
                    "{label}: u = {}, alpha = {}",
                    pc.u, pc.alpha
                )));
            }
        }
        let m = self.priors.matern;
        if let Some(r0) = m.range0_km {
            if !(r0 > 0.0 && r0.is_finite()) {
                return Err(SpecError::InvalidPrior(format!("matern range0_km = {r0}")));
            }
        }
        if !(m.alpha_range > 0.0 && m.alpha_range < 1.0)
            || !(m.alpha_sigma > 0.0 && m.alpha_sigma < 1.0)
            || !(m.sigma0 > 0.0 && m.sigma0.is_finite())
        {
            return Err(SpecError::InvalidPrior(format!("matern settings {m:?}")));
        }
        if !(self.matern_smoothness > 0.0 && self.matern_smoothness.is_finite()) {
            return Err(SpecError::InvalidPrior(format!(
                "matern smoothness = {}",
                self.matern_smoothness
            )));
        }
        Ok(())
    }

    /// Serialize to the TOML configuration dialect.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("ModelSpec is always serializable")
    }

    /// Parse from TOML; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_heat_kind() {
        assert_eq!(ModelSpec::for_heat(HeatKind::ExtremeMaxTemp).lag, 7);
        assert_eq!(ModelSpec::for_heat(HeatKind::Heatwave).lag, 3);
        assert!(ModelSpec::default().validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = ModelSpec::default();
        spec.lag = 0;
        assert_eq!(spec.validate(), Err(SpecError::NonPositiveLag(0)));

        let spec = ModelSpec::default()
            .with_fixed_terms(vec![FixedTerm::ExtremeHeat, FixedTerm::Intercept, FixedTerm::ExtremeHeat]);
        assert_eq!(
            spec.validate(),
            Err(SpecError::DuplicateTerm(FixedTerm::ExtremeHeat))
        );

        let spec = ModelSpec::default().with_fixed_terms(vec![FixedTerm::ExtremeHeat]);
        assert_eq!(spec.validate(), Err(SpecError::MissingIntercept));

        // Interaction without its pollutant main effect.
        let spec = ModelSpec::default().with_fixed_terms(vec![
            FixedTerm::Intercept,
            FixedTerm::ExtremeHeat,
            FixedTerm::HeatO3,
        ]);
        assert_eq!(
            spec.validate(),
            Err(SpecError::OrphanInteraction {
                interaction: FixedTerm::HeatO3,
                requires: FixedTerm::O3Categories,
            })
        );

        // Interaction without the heat indicator itself.
        let spec = ModelSpec::default().with_fixed_terms(vec![
            FixedTerm::Intercept,
            FixedTerm::O3Categories,
            FixedTerm::HeatO3,
        ]);
        assert_eq!(
            spec.validate(),
            Err(SpecError::OrphanInteraction {
                interaction: FixedTerm::HeatO3,
                requires: FixedTerm::ExtremeHeat,
            })
        );

        let mut spec = ModelSpec::default();
        spec.priors.area_iid.alpha = 1.0;
        assert!(matches!(spec.validate(), Err(SpecError::InvalidPrior(_))));
    }

    #[test]
    fn toml_round_trip_preserves_spec() {
        let spec = ModelSpec::for_heat(HeatKind::Heatwave);
        let text = spec.to_toml();
        let back = ModelSpec::from_toml(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ModelSpec::default().to_toml();
        text.push_str("\nmystery_knob = 3\n");
        assert!(ModelSpec::from_toml(&text).is_err());
    }
}

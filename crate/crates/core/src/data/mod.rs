//! Domain records: areas, annual covariates, census-tract values, death
//! counts, daily area exposures, and population-weighted aggregation.

mod panel;

pub use panel::{
    assemble_panel, study_years, summer_days, IndicatorInputs, Panel, PanelRow, PanelSettings,
    STUDY_MONTHS,
};

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::ExposureError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("area {area}: {reason}")]
    InvalidArea { area: String, reason: String },
    #[error("area {area}, year {year}: covariates invalid: {reason}")]
    InvalidCovariates {
        area: String,
        year: i32,
        reason: String,
    },
    #[error("area {area}, year {year}: missing {what}")]
    MissingAnnualData {
        area: String,
        year: i32,
        what: &'static str,
    },
    #[error("aggregation for area {area}, year {year} has {reason}")]
    Aggregation {
        area: String,
        year: i32,
        reason: String,
    },
    #[error("tract {tract} mixes areas or years within one aggregation group")]
    InconsistentTracts { tract: String },
    #[error("death counts for area {area} on {date} violate ordering (85+ <= 65+ <= all)")]
    InvalidDeathCounts { area: String, date: NaiveDate },
    #[error("no death record for retained row (area {area}, {date}); zero counts must be explicit")]
    MissingDeathRecord { area: String, date: NaiveDate },
    #[error("death table is empty")]
    EmptyDeaths,
    #[error("duplicate {table} record for area {area} on {date}")]
    DuplicateRecord {
        table: &'static str,
        area: String,
        date: NaiveDate,
    },
    #[error("panel year {0} outside the supported 2012-2022 study window")]
    YearOutsideWindow(i32),
    #[error("panel settings list no years")]
    NoYears,
    #[error("{covariate} quartiles for year {year}: {source}")]
    CovariateQuartiles {
        covariate: &'static str,
        year: i32,
        source: ExposureError,
    },
    #[error(transparent)]
    Exposure(#[from] ExposureError),
}

/// Annual socioeconomic covariates for one area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnualCovariates {
    /// Average income per person, euros.
    pub income_eur: f64,
    /// Gini index, percent.
    pub gini_pct: f64,
    /// Share of residents aged 65+, percent.
    pub pct_65_plus: f64,
}

impl AnnualCovariates {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.income_eur.is_finite() && self.income_eur > 0.0) {
            return Err(format!("income {} must be positive", self.income_eur));
        }
        if !(self.gini_pct.is_finite() && self.gini_pct > 0.0 && self.gini_pct < 100.0) {
            return Err(format!("Gini {} outside (0, 100)", self.gini_pct));
        }
        if !(self.pct_65_plus.is_finite()
            && (0.0..=100.0).contains(&self.pct_65_plus))
        {
            return Err(format!("65+ share {} outside [0, 100]", self.pct_65_plus));
        }
        Ok(())
    }
}

/// One health-area unit: centroid on the planar km grid plus per-year
/// population and covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaUnit {
    pub area_id: String,
    pub centroid: (f64, f64),
    pub population_by_year: BTreeMap<i32, u64>,
    pub covariates_by_year: BTreeMap<i32, AnnualCovariates>,
}

impl AreaUnit {
    /// Check the unit supports every modeled year.
    pub fn validate(&self, years: &[i32]) -> Result<(), DataError> {
        if !(self.centroid.0.is_finite() && self.centroid.1.is_finite()) {
            return Err(DataError::InvalidArea {
                area: self.area_id.clone(),
                reason: "centroid coordinates must be finite".into(),
            });
        }
        for &year in years {
            match self.population_by_year.get(&year) {
                Some(&p) if p >= 1 => {}
                Some(_) => {
                    return Err(DataError::InvalidArea {
                        area: self.area_id.clone(),
                        reason: format!("population for {year} must be at least 1"),
                    })
                }
                None => {
                    return Err(DataError::MissingAnnualData {
                        area: self.area_id.clone(),
                        year,
                        what: "population",
                    })
                }
            }
            match self.covariates_by_year.get(&year) {
                Some(c) => c.validate().map_err(|reason| DataError::InvalidCovariates {
                    area: self.area_id.clone(),
                    year,
                    reason,
                })?,
                None => {
                    return Err(DataError::MissingAnnualData {
                        area: self.area_id.clone(),
                        year,
                        what: "covariates",
                    })
                }
            }
        }
        Ok(())
    }
}

/// One census tract's value of a single covariate in a single year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusTractValue {
    pub tract_id: String,
    pub parent_area_id: String,
    pub year: i32,
    pub value: f64,
    pub population: u64,
}

/// The covariates deliverable from census tracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    IncomeEur,
    GiniPct,
    Pct65Plus,
}

impl CovariateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CovariateKind::IncomeEur => "income_eur",
            CovariateKind::GiniPct => "gini_pct",
            CovariateKind::Pct65Plus => "pct_65_plus",
        }
    }

    pub fn parse(s: &str) -> Option<CovariateKind> {
        Some(match s {
            "income_eur" => CovariateKind::IncomeEur,
            "gini_pct" => CovariateKind::GiniPct,
            "pct_65_plus" => CovariateKind::Pct65Plus,
            _ => return None,
        })
    }
}

/// Daily death counts for one area, by age stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeathCounts {
    pub area_id: String,
    pub date: NaiveDate,
    pub deaths_all: u64,
    pub deaths_65: u64,
    pub deaths_85: u64,
}

impl DeathCounts {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.deaths_85 <= self.deaths_65 && self.deaths_65 <= self.deaths_all {
            Ok(())
        } else {
            Err(DataError::InvalidDeathCounts {
                area: self.area_id.clone(),
                date: self.date,
            })
        }
    }
}

/// Predicted daily exposures for one area, with per-field prediction sds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyAreaExposure {
    pub area_id: String,
    pub date: NaiveDate,
    pub tmax_c: f64,
    pub rh_pct: f64,
    pub pm10_ugm3: f64,
    pub no2_ugm3: f64,
    pub o3_ugm3: f64,
    pub tmax_sd: f64,
    pub rh_sd: f64,
    pub pm10_sd: f64,
    pub no2_sd: f64,
    pub o3_sd: f64,
}

/// Population-weighted average of one area-year's tract values:
/// `sum(value * pop) / sum(pop)`.
pub fn population_weighted_aggregate(values: &[CensusTractValue]) -> Result<f64, DataError> {
    let (area, year) = match values.first() {
        Some(v) => (v.parent_area_id.clone(), v.year),
        None => {
            return Err(DataError::Aggregation {
                area: "<unknown>".into(),
                year: 0,
                reason: "no tracts".into(),
            })
        }
    };
    let mut weighted = 0.0;
    let mut total_pop = 0u64;
    for v in values {
        if v.parent_area_id != area || v.year != year {
            return Err(DataError::InconsistentTracts { tract: v.tract_id.clone() });
        }
        if !v.value.is_finite() {
            return Err(DataError::Aggregation {
                area,
                year,
                reason: format!("non-finite value in tract {}", v.tract_id),
            });
        }
        weighted += v.value * v.population as f64;
        total_pop += v.population;
    }
    if total_pop == 0 {
        return Err(DataError::Aggregation {
            area,
            year,
            reason: "zero total population".into(),
        });
    }
    Ok(weighted / total_pop as f64)
}

/// Aggregate tract-level covariate records into per-(area, year) annual
/// covariates. Every area-year must deliver all three covariates.
pub fn aggregate_annual_covariates(
    records: &[(CovariateKind, CensusTractValue)],
) -> Result<BTreeMap<(String, i32), AnnualCovariates>, DataError> {
    let mut groups: BTreeMap<(String, i32, CovariateKind), Vec<CensusTractValue>> =
        BTreeMap::new();
    for (kind, tract) in records {
        groups
            .entry((tract.parent_area_id.clone(), tract.year, *kind))
            .or_default()
            .push(tract.clone());
    }
    let mut aggregated: BTreeMap<(String, i32), BTreeMap<CovariateKind, f64>> = BTreeMap::new();
    for ((area, year, kind), tracts) in groups {
        let value = population_weighted_aggregate(&tracts)?;
        aggregated.entry((area, year)).or_default().insert(kind, value);
    }
    let mut out = BTreeMap::new();
    for ((area, year), by_kind) in aggregated {
        let need = |kind: CovariateKind| -> Result<f64, DataError> {
            by_kind.get(&kind).copied().ok_or(DataError::MissingAnnualData {
                area: area.clone(),
                year,
                what: kind.as_str(),
            })
        };
        let covs = AnnualCovariates {
            income_eur: need(CovariateKind::IncomeEur)?,
            gini_pct: need(CovariateKind::GiniPct)?,
            pct_65_plus: need(CovariateKind::Pct65Plus)?,
        };
        covs.validate().map_err(|reason| DataError::InvalidCovariates {
            area: area.clone(),
            year,
            reason,
        })?;
        out.insert((area, year), covs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tract(id: &str, area: &str, year: i32, value: f64, pop: u64) -> CensusTractValue {
        CensusTractValue {
            tract_id: id.into(),
            parent_area_id: area.into(),
            year,
            value,
            population: pop,
        }
    }

    #[test]
    fn aggregation_weights_by_population() {
        let equal = [tract("t1", "A", 2015, 10.0, 100), tract("t2", "A", 2015, 20.0, 100)];
        assert_eq!(population_weighted_aggregate(&equal).unwrap(), 15.0);
        let zero_weight = [tract("t1", "A", 2015, 10.0, 0), tract("t2", "A", 2015, 20.0, 5)];
        assert_eq!(population_weighted_aggregate(&zero_weight).unwrap(), 20.0);
        let hand = [tract("t1", "A", 2015, 8.0, 100), tract("t2", "A", 2015, 12.0, 300)];
        assert_eq!(population_weighted_aggregate(&hand).unwrap(), 11.0);
    }

    #[test]
    fn aggregation_is_order_and_scale_invariant() {
        let a = [
            tract("t1", "A", 2015, 8.0, 100),
            tract("t2", "A", 2015, 12.0, 300),
            tract("t3", "A", 2015, 5.0, 50),
        ];
        let mut reversed = a.to_vec();
        reversed.reverse();
        let scaled: Vec<_> = a
            .iter()
            .cloned()
            .map(|mut t| {
                t.population *= 7;
                t
            })
            .collect();
        let base = population_weighted_aggregate(&a).unwrap();
        assert_eq!(base, population_weighted_aggregate(&reversed).unwrap());
        assert!((base - population_weighted_aggregate(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aggregation_rejects_degenerate_input() {
        assert!(matches!(
            population_weighted_aggregate(&[]),
            Err(DataError::Aggregation { .. })
        ));
        let unpopulated = [tract("t1", "A", 2015, 10.0, 0)];
        assert!(matches!(
            population_weighted_aggregate(&unpopulated),
            Err(DataError::Aggregation { .. })
        ));
        let mixed = [tract("t1", "A", 2015, 10.0, 5), tract("t2", "B", 2015, 10.0, 5)];
        assert!(matches!(
            population_weighted_aggregate(&mixed),
            Err(DataError::InconsistentTracts { .. })
        ));
        let nan = [tract("t1", "A", 2015, f64::NAN, 5)];
        assert!(population_weighted_aggregate(&nan).is_err());
    }

    #[test]
    fn covariate_aggregation_requires_all_three_kinds() {
        use CovariateKind::*;
        let mut records = vec![
            (IncomeEur, tract("t1", "A", 2015, 14000.0, 100)),
            (IncomeEur, tract("t2", "A", 2015, 18000.0, 300)),
            (GiniPct, tract("t1", "A", 2015, 30.0, 100)),
            (GiniPct, tract("t2", "A", 2015, 34.0, 300)),
        ];
        assert!(matches!(
            aggregate_annual_covariates(&records),
            Err(DataError::MissingAnnualData { what: "pct_65_plus", .. })
        ));
        records.push((Pct65Plus, tract("t1", "A", 2015, 20.0, 100)));
        records.push((Pct65Plus, tract("t2", "A", 2015, 24.0, 300)));
        let table = aggregate_annual_covariates(&records).unwrap();
        let covs = table[&("A".to_string(), 2015)];
        assert_eq!(covs.income_eur, 17000.0);
        assert_eq!(covs.gini_pct, 33.0);
        assert_eq!(covs.pct_65_plus, 23.0);
    }

    #[test]
    fn death_counts_enforce_stratum_ordering() {
        let ok = DeathCounts {
            area_id: "A".into(),
            date: NaiveDate::from_ymd_opt(2015, 7, 1).unwrap(),
            deaths_all: 5,
            deaths_65: 3,
            deaths_85: 1,
        };
        assert!(ok.validate().is_ok());
        let bad = DeathCounts { deaths_85: 4, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(DataError::InvalidDeathCounts { .. })));
    }

    #[test]
    fn area_validation_names_the_gap() {
        let mut area = AreaUnit {
            area_id: "A".into(),
            centroid: (10.0, 20.0),
            population_by_year: [(2012, 1000u64)].into(),
            covariates_by_year: [(
                2012,
                AnnualCovariates { income_eur: 15000.0, gini_pct: 31.0, pct_65_plus: 18.0 },
            )]
            .into(),
        };
        assert!(area.validate(&[2012]).is_ok());
        assert!(matches!(
            area.validate(&[2012, 2013]),
            Err(DataError::MissingAnnualData { year: 2013, what: "population", .. })
        ));
        area.population_by_year.insert(2013, 500);
        assert!(matches!(
            area.validate(&[2012, 2013]),
            Err(DataError::MissingAnnualData { year: 2013, what: "covariates", .. })
        ));
        area.covariates_by_year.insert(
            2013,
            AnnualCovariates { income_eur: -1.0, gini_pct: 31.0, pct_65_plus: 18.0 },
        );
        assert!(matches!(
            area.validate(&[2012, 2013]),
            Err(DataError::InvalidCovariates { year: 2013, .. })
        ));
        area.centroid = (f64::NAN, 0.0);
        assert!(matches!(area.validate(&[2012]), Err(DataError::InvalidArea { .. })));
    }
}

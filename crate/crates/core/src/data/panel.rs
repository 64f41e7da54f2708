//! Panel assembly: join areas, deaths, exposures, and indicator tables into
//! the modeling panel, applying the lag-window retention rule.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{AreaUnit, DailyAreaExposure, DataError, DeathCounts};
use crate::exposure::{
    extreme_heat_indicator, pollutant_category, q4_humidity_indicator, quartile_categorize,
    ExposureError, Pollutant, TriggerTable,
};
use crate::model::{FixedTerm, HeatKind, ModelSpec, OutcomeStratum};

/// The summer months of the study window.
pub const STUDY_MONTHS: [u32; 4] = [6, 7, 8, 9];

/// The years the panel may cover.
pub fn study_years() -> Vec<i32> {
    (2012..=2022).collect()
}

/// All summer days (June 1 through September 30) of one year.
pub fn summer_days(year: i32) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(year, 6, 1).unwrap();
    let end = NaiveDate::from_ymd_opt(year, 9, 30).unwrap();
    start.iter_days().take_while(|d| *d <= end).collect()
}

/// Which years of the study window to assemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSettings {
    pub years: Vec<i32>,
}

impl Default for PanelSettings {
    fn default() -> Self {
        PanelSettings { years: study_years() }
    }
}

impl PanelSettings {
    pub fn for_years(years: impl IntoIterator<Item = i32>) -> Self {
        PanelSettings { years: years.into_iter().collect() }
    }

    fn validated_years(&self) -> Result<Vec<i32>, DataError> {
        if self.years.is_empty() {
            return Err(DataError::NoYears);
        }
        let mut years = self.years.clone();
        years.sort_unstable();
        years.dedup();
        let window = study_years();
        for &y in &years {
            if !window.contains(&y) {
                return Err(DataError::YearOutsideWindow(y));
            }
        }
        Ok(years)
    }
}

/// Precomputed indicator tables consumed by panel assembly.
#[derive(Debug, Clone, Default)]
pub struct IndicatorInputs {
    /// Per-(area, month) extreme-heat triggers (°C).
    pub triggers: TriggerTable,
    /// Per-area fourth-quartile humidity thresholds (%).
    pub q4_thresholds: BTreeMap<String, f64>,
    /// Region-wide daily heatwave flags; a date absent from the map counts
    /// as uncovered, not as zero.
    pub heatwave_flags: BTreeMap<NaiveDate, u8>,
}

/// One modeling row: outcome, lagged indicators, categories, offset, and the
/// effect indices the latent field needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub area_id: String,
    pub date: NaiveDate,
    pub outcome: u64,
    pub extreme_heat_lagged: u8,
    pub q4_humidity_lagged: u8,
    pub pm10_cat: u8,
    pub no2_cat: u8,
    pub o3_cat: u8,
    pub income_q: u8,
    pub gini_q: u8,
    pub pct65_q: u8,
    /// ln(area population) for the row's year.
    pub log_offset: f64,
    pub year_index: usize,
    pub month_index: usize,
    pub area_index: usize,
}

/// The assembled panel plus the dictionaries behind the row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub rows: Vec<PanelRow>,
    /// Sorted area identifiers; `area_index` points here.
    pub area_ids: Vec<String>,
    /// Area centroids (km), aligned with `area_ids`.
    pub centroids: Vec<(f64, f64)>,
    /// Sorted years; `year_index` points here.
    pub years: Vec<i32>,
    /// Panel months (June through September); `month_index` points here.
    pub months: Vec<u32>,
    /// (area, summer-day) cells dropped under the lag-window rule.
    pub dropped: usize,
}

impl Panel {
    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_months(&self) -> usize {
        self.months.len()
    }

    /// Total (area, summer-day) cells considered during assembly.
    pub fn total_cells(&self) -> usize {
        self.rows.len() + self.dropped
    }

    pub fn max_outcome(&self) -> u64 {
        self.rows.iter().map(|r| r.outcome).max().unwrap_or(0)
    }

    /// The (area, date) keys of the retained rows.
    pub fn row_keys(&self) -> BTreeSet<(String, NaiveDate)> {
        self.rows.iter().map(|r| (r.area_id.clone(), r.date)).collect()
    }

    /// Keep only rows whose (area, date) key is in `keys`; removed rows
    /// count as dropped. Index dictionaries are unchanged.
    pub fn restrict_to(&self, keys: &BTreeSet<(String, NaiveDate)>) -> Panel {
        let rows: Vec<PanelRow> = self
            .rows
            .iter()
            .filter(|r| keys.contains(&(r.area_id.clone(), r.date)))
            .cloned()
            .collect();
        let dropped = self.dropped + (self.rows.len() - rows.len());
        Panel { rows, dropped, ..self.clone() }
    }
}

fn quartile_map(
    areas: &[AreaUnit],
    year: i32,
    pick: impl Fn(&super::AnnualCovariates) -> f64,
    required: bool,
    covariate: &'static str,
) -> Result<BTreeMap<String, u8>, DataError> {
    if !required {
        return Ok(areas.iter().map(|a| (a.area_id.clone(), 1)).collect());
    }
    let values: Vec<(String, f64)> = areas
        .iter()
        .map(|a| (a.area_id.clone(), pick(&a.covariates_by_year[&year])))
        .collect();
    quartile_categorize(&values).map_err(|source| DataError::CovariateQuartiles {
        covariate,
        year,
        source,
    })
}

/// Assemble the modeling panel.
///
/// One candidate cell exists per (area, summer day in the selected years).
/// A cell is retained when every exposure date its lag windows touch is
/// available (the indicator date `t-l` and the pollutant-mean window `t-l`
/// through `t-1`; at lag 0 both collapse to the same day `t`). Retained
/// cells require an explicit death record. Rows come out sorted by
/// (area_id, date).
pub fn assemble_panel(
    areas: &[AreaUnit],
    deaths: &[DeathCounts],
    exposures: &[DailyAreaExposure],
    indicators: &IndicatorInputs,
    spec: &ModelSpec,
    settings: &PanelSettings,
) -> Result<Panel, DataError> {
    let years = settings.validated_years()?;
    let mut sorted_areas: Vec<&AreaUnit> = areas.iter().collect();
    sorted_areas.sort_by(|a, b| a.area_id.cmp(&b.area_id));
    for pair in sorted_areas.windows(2) {
        if pair[0].area_id == pair[1].area_id {
            return Err(DataError::InvalidArea {
                area: pair[0].area_id.clone(),
                reason: "duplicate area record".into(),
            });
        }
    }
    for area in &sorted_areas {
        area.validate(&years)?;
    }

    if deaths.is_empty() {
        return Err(DataError::EmptyDeaths);
    }
    let mut death_map: BTreeMap<(&str, NaiveDate), &DeathCounts> = BTreeMap::new();
    for d in deaths {
        d.validate()?;
        if death_map.insert((d.area_id.as_str(), d.date), d).is_some() {
            return Err(DataError::DuplicateRecord {
                table: "deaths",
                area: d.area_id.clone(),
                date: d.date,
            });
        }
    }

    let mut exposure_map: BTreeMap<&str, BTreeMap<NaiveDate, &DailyAreaExposure>> =
        BTreeMap::new();
    for e in exposures {
        if exposure_map
            .entry(e.area_id.as_str())
            .or_default()
            .insert(e.date, e)
            .is_some()
        {
            return Err(DataError::DuplicateRecord {
                table: "exposures",
                area: e.area_id.clone(),
                date: e.date,
            });
        }
    }

    let has_term = |t: FixedTerm| spec.fixed_terms.contains(&t);
    // Quartile categories per year; covariates outside the model collapse to
    // the reference category so small fixtures stay assemblable.
    let mut income_by_year = BTreeMap::new();
    let mut gini_by_year = BTreeMap::new();
    let mut pct65_by_year = BTreeMap::new();
    for &year in &years {
        income_by_year.insert(
            year,
            quartile_map(areas, year, |c| c.income_eur, has_term(FixedTerm::IncomeQuartiles), "income")?,
        );
        gini_by_year.insert(
            year,
            quartile_map(areas, year, |c| c.gini_pct, has_term(FixedTerm::GiniQuartiles), "gini")?,
        );
        pct65_by_year.insert(
            year,
            quartile_map(areas, year, |c| c.pct_65_plus, has_term(FixedTerm::Pct65Quartiles), "pct65")?,
        );
    }

    let lag = spec.lag as u64;
    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for (area_index, area) in sorted_areas.iter().enumerate() {
        let area_exposures = exposure_map.get(area.area_id.as_str());
        let humidity_threshold = indicators.q4_thresholds.get(&area.area_id).copied();
        for (year_index, &year) in years.iter().enumerate() {
            let log_offset = (area.population_by_year[&year] as f64).ln();
            let income_q = income_by_year[&year][&area.area_id];
            let gini_q = gini_by_year[&year][&area.area_id];
            let pct65_q = pct65_by_year[&year][&area.area_id];
            for date in summer_days(year) {
                let Some(exp_map) = area_exposures else {
                    dropped += 1;
                    continue;
                };
                // Dates the row's lag windows touch: `t-l` for the
                // indicators and `t-l..t-1` for the pollutant means; at lag
                // 0 everything reads day `t` itself.
                let indicator_date = date
                    .checked_sub_days(Days::new(lag))
                    .expect("dates stay in range");
                let window: Vec<NaiveDate> = if lag == 0 {
                    vec![date]
                } else {
                    (1..=lag)
                        .map(|back| date.checked_sub_days(Days::new(back)).unwrap())
                        .collect()
                };
                if !window.iter().all(|d| exp_map.contains_key(d)) {
                    dropped += 1;
                    continue;
                }
                let indicator_exp = exp_map[&indicator_date];

                let extreme_heat_lagged = match spec.heat {
                    HeatKind::ExtremeMaxTemp => {
                        let trigger = indicators
                            .triggers
                            .get(&area.area_id, indicator_date.month())?;
                        extreme_heat_indicator(indicator_exp.tmax_c, trigger)
                    }
                    HeatKind::Heatwave => {
                        match indicators.heatwave_flags.get(&indicator_date) {
                            Some(&flag) => flag,
                            None => {
                                dropped += 1;
                                continue;
                            }
                        }
                    }
                };

                let q4_humidity_lagged = match humidity_threshold {
                    Some(t) => q4_humidity_indicator(indicator_exp.rh_pct, t),
                    None if has_term(FixedTerm::Q4Humidity) => {
                        return Err(ExposureError::MissingHumidityData(
                            area.area_id.clone(),
                        )
                        .into())
                    }
                    None => 0,
                };

                let mean_of = |pick: fn(&DailyAreaExposure) -> f64| -> f64 {
                    let sum: f64 = window.iter().map(|d| pick(exp_map[d])).sum();
                    sum / window.len() as f64
                };
                let pm10_cat = pollutant_category(mean_of(|e| e.pm10_ugm3), Pollutant::Pm10)?;
                let no2_cat = pollutant_category(mean_of(|e| e.no2_ugm3), Pollutant::No2)?;
                let o3_cat = pollutant_category(mean_of(|e| e.o3_ugm3), Pollutant::O3)?;

                let deaths_row = death_map
                    .get(&(area.area_id.as_str(), date))
                    .ok_or_else(|| DataError::MissingDeathRecord {
                        area: area.area_id.clone(),
                        date,
                    })?;
                let outcome = match spec.outcome {
                    OutcomeStratum::All => deaths_row.deaths_all,
                    OutcomeStratum::Age65Plus => deaths_row.deaths_65,
                    OutcomeStratum::Age85Plus => deaths_row.deaths_85,
                };

                rows.push(PanelRow {
                    area_id: area.area_id.clone(),
                    date,
                    outcome,
                    extreme_heat_lagged,
                    q4_humidity_lagged,
                    pm10_cat,
                    no2_cat,
                    o3_cat,
                    income_q,
                    gini_q,
                    pct65_q,
                    log_offset,
                    year_index,
                    month_index: (date.month() - STUDY_MONTHS[0]) as usize,
                    area_index,
                });
            }
        }
    }

    let total: usize = years.len() * sorted_areas.len() * 122;
    debug_assert_eq!(rows.len() + dropped, total);

    Ok(Panel {
        rows,
        area_ids: sorted_areas.iter().map(|a| a.area_id.clone()).collect(),
        centroids: sorted_areas.iter().map(|a| a.centroid).collect(),
        years,
        months: STUDY_MONTHS.to_vec(),
        dropped,
    })
}

//! Indicator engineering: trigger temperatures, extreme-heat and heatwave
//! flags, humidity and pollutant categories, quartile covariates, and lag
//! operators.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::ExposureError;
use crate::math::{percentile_type7, quartile_cuts};

/// Fraction of stations that must flag extreme heat for a heatwave day.
pub const DEFAULT_HEATWAVE_FRACTION: f64 = 0.10;
/// Minimum consecutive qualifying days for a heatwave episode.
pub const DEFAULT_HEATWAVE_MIN_RUN: usize = 3;
/// Minimum reference-period days per (area, month) trigger cell.
pub const DEFAULT_TRIGGER_MIN_OBS: usize = 20;

/// Climatology years for trigger temperatures: the decade before the last
/// study season, minus the anomalously hot 2015 season.
pub fn default_reference_years() -> Vec<i32> {
    (2012..=2021).filter(|&y| y != 2015).collect()
}

/// Per-(area, month) extreme-heat trigger temperatures (°C).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerTable {
    triggers: BTreeMap<(String, u32), f64>,
}

impl TriggerTable {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u32, f64)>) -> Self {
        TriggerTable {
            triggers: entries.into_iter().map(|(a, m, t)| ((a, m), t)).collect(),
        }
    }

    pub fn get(&self, area_id: &str, month: u32) -> Result<f64, ExposureError> {
        self.triggers
            .get(&(area_id.to_string(), month))
            .copied()
            .ok_or_else(|| ExposureError::MissingTrigger(area_id.to_string(), month))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32, f64)> + '_ {
        self.triggers.iter().map(|((a, m), t)| (a.as_str(), *m, *t))
    }

    pub fn len(&self) -> usize {
        self.triggers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triggers.is_empty()
    }
}

/// Build the trigger table: per (area, month), the 95th percentile of daily
/// maximum temperature pooled over the reference years.
pub fn compute_trigger_table(
    daily_tmax: &[(String, NaiveDate, f64)],
    reference_years: &[i32],
    min_obs: usize,
) -> Result<TriggerTable, ExposureError> {
    let mut cells: BTreeMap<(String, u32), Vec<f64>> = BTreeMap::new();
    for (area, date, tmax) in daily_tmax {
        if reference_years.contains(&date.year()) && tmax.is_finite() {
            cells
                .entry((area.clone(), date.month()))
                .or_default()
                .push(*tmax);
        }
    }
    let mut triggers = BTreeMap::new();
    for ((area, month), values) in cells {
        if values.len() < min_obs {
            return Err(ExposureError::InsufficientTriggerData {
                area,
                month,
                got: values.len(),
                need: min_obs,
            });
        }
        triggers.insert((area, month), percentile_type7(&values, 0.95));
    }
    Ok(TriggerTable { triggers })
}

/// 1 when the day's maximum temperature strictly exceeds the trigger.
pub fn extreme_heat_indicator(tmax: f64, trigger: f64) -> u8 {
    debug_assert!(tmax.is_finite() && trigger.is_finite());
    u8::from(tmax > trigger)
}

/// 1 when relative humidity strictly exceeds the area's fourth-quartile
/// threshold.
pub fn q4_humidity_indicator(rh: f64, threshold: f64) -> u8 {
    debug_assert!(rh.is_finite() && threshold.is_finite());
    u8::from(rh > threshold)
}

/// Per-area 75th-percentile humidity thresholds over the full study period.
pub fn q4_humidity_thresholds(values: &[(String, f64)]) -> BTreeMap<String, f64> {
    let mut by_area: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (area, rh) in values {
        if rh.is_finite() {
            by_area.entry(area.clone()).or_default().push(*rh);
        }
    }
    by_area
        .into_iter()
        .map(|(area, vals)| {
            let t = percentile_type7(&vals, 0.75);
            (area, t)
        })
        .collect()
}

/// Region-wide heatwave flags: day `t` is 1 iff it belongs to a maximal run
/// of at least `min_run` consecutive days on each of which at least
/// `ceil(frac * station_count)` stations flag extreme heat.
pub fn heatwave_indicator(
    station_flags_by_day: &[Vec<bool>],
    station_count: usize,
    frac: f64,
    min_run: usize,
) -> Result<Vec<u8>, ExposureError> {
    assert!(station_count > 0, "heatwave detection needs stations");
    assert!(frac > 0.0 && frac <= 1.0, "station fraction must be in (0, 1]");
    assert!(min_run >= 1, "run length must be positive");
    let threshold = (frac * station_count as f64).ceil() as usize;
    let mut meets = Vec::with_capacity(station_flags_by_day.len());
    for (day, flags) in station_flags_by_day.iter().enumerate() {
        if flags.len() != station_count {
            return Err(ExposureError::InconsistentStationSet {
                day,
                got: flags.len(),
                expected: station_count,
            });
        }
        meets.push(flags.iter().filter(|&&f| f).count() >= threshold);
    }

    let mut out = vec![0u8; meets.len()];
    let mut start = 0;
    while start < meets.len() {
        if !meets[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end + 1 < meets.len() && meets[end + 1] {
            end += 1;
        }
        if end - start + 1 >= min_run {
            for flag in &mut out[start..=end] {
                *flag = 1;
            }
        }
        start = end + 1;
    }
    Ok(out)
}

/// Mean of the `l` values strictly before day `t` (`t-l` through `t-1`);
/// missing if any of them is missing or the window precedes the series.
pub fn lagged_mean(series: &[Option<f64>], t: usize, l: usize) -> Option<f64> {
    assert!(l >= 1, "lag must be positive");
    if t < l {
        return None;
    }
    let window = &series[t - l..t];
    let mut sum = 0.0;
    for v in window {
        sum += (*v)?;
    }
    Some(sum / l as f64)
}

/// The indicator value `l` days before day `t`; missing if unobserved or the
/// lag precedes the series.
pub fn lagged_indicator(series: &[Option<u8>], t: usize, l: usize) -> Option<u8> {
    assert!(l >= 1, "lag must be positive");
    if t < l {
        return None;
    }
    series[t - l]
}

/// Pollutants with fixed air-quality category boundaries (µg/m³).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pollutant {
    Pm10,
    No2,
    O3,
}

impl Pollutant {
    /// Lower-inclusive category boundaries above the reference category.
    pub fn boundaries(self) -> &'static [f64] {
        match self {
            Pollutant::Pm10 => &[15.0, 45.0],
            Pollutant::No2 => &[10.0, 25.0],
            Pollutant::O3 => &[60.0, 100.0, 120.0],
        }
    }

    pub fn category_count(self) -> u8 {
        self.boundaries().len() as u8 + 1
    }
}

/// Category code for a pollutant concentration: 1 is the reference (below
/// the first boundary); each boundary is lower-inclusive for the next
/// category.
pub fn pollutant_category(value: f64, pollutant: Pollutant) -> Result<u8, ExposureError> {
    if !value.is_finite() || value < 0.0 {
        return Err(ExposureError::InvalidPollutantValue(value));
    }
    let mut category = 1u8;
    for &bound in pollutant.boundaries() {
        if value >= bound {
            category += 1;
        }
    }
    Ok(category)
}

/// Quartile categories (1–4) for one year's cross-area covariate values;
/// cut points are the 25/50/75 percentiles and ties resolve to the lower
/// category.
pub fn quartile_categorize(
    values: &[(String, f64)],
) -> Result<BTreeMap<String, u8>, ExposureError> {
    let mut distinct: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    distinct.sort_unstable_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(ExposureError::DegenerateQuartiles(distinct.len()));
    }
    let all: Vec<f64> = values.iter().map(|(_, v)| *v).collect();
    let cuts = quartile_cuts(&all);
    Ok(values
        .iter()
        .map(|(area, v)| {
            let mut cat = 4u8;
            for (i, cut) in cuts.iter().enumerate() {
                if *v <= *cut {
                    cat = i as u8 + 1;
                    break;
                }
            }
            (area.clone(), cat)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn trigger_table_pools_reference_years_per_cell() {
        // One area, one month, values 1..=100 spread over reference years.
        let years = default_reference_years();
        let mut rows = Vec::new();
        for (i, v) in (1..=100).enumerate() {
            let year = years[i % years.len()];
            let day = (i % 28) as u32 + 1;
            rows.push(("A1".to_string(), date(year, 7, day), v as f64));
        }
        let table = compute_trigger_table(&rows, &years, 20).unwrap();
        assert_relative_eq!(table.get("A1", 7).unwrap(), 95.05, epsilon = 1e-12);
        assert!(matches!(
            table.get("A1", 8),
            Err(ExposureError::MissingTrigger(_, 8))
        ));

        // Constant series -> the constant.
        let flat: Vec<_> = (0..25)
            .map(|i| ("A1".to_string(), date(2013, 6, i % 28 + 1), 30.0))
            .collect();
        let table = compute_trigger_table(&flat, &years, 20).unwrap();
        assert_eq!(table.get("A1", 6).unwrap(), 30.0);
    }

    #[test]
    fn trigger_table_excludes_non_reference_years() {
        let years = default_reference_years();
        assert_eq!(years.len(), 9);
        assert!(!years.contains(&2015));
        // 25 mild days across reference years plus scorching 2015 days that
        // must not move the percentile.
        let mut rows: Vec<_> = (0..25)
            .map(|i| {
                let year = years[i % years.len()];
                ("A1".to_string(), date(year, 7, (i % 28) as u32 + 1), 25.0 + (i % 5) as f64)
            })
            .collect();
        let with_outliers = {
            let mut r = rows.clone();
            r.extend((1..=20).map(|d| ("A1".to_string(), date(2015, 7, d), 45.0)));
            r
        };
        let base = compute_trigger_table(&rows, &years, 20).unwrap();
        let shielded = compute_trigger_table(&with_outliers, &years, 20).unwrap();
        assert_eq!(base.get("A1", 7).unwrap(), shielded.get("A1", 7).unwrap());
        // Order invariance.
        rows.reverse();
        let reversed = compute_trigger_table(&rows, &years, 20).unwrap();
        assert_eq!(base, reversed);
        // Insufficient data names the cell.
        let short = &rows[..10];
        assert!(matches!(
            compute_trigger_table(short, &years, 20),
            Err(ExposureError::InsufficientTriggerData { month: 7, got: 10, need: 20, .. })
        ));
    }

    #[test]
    fn heat_indicators_use_strict_exceedance() {
        assert_eq!(extreme_heat_indicator(35.1, 35.0), 1);
        assert_eq!(extreme_heat_indicator(35.0, 35.0), 0);
        assert_eq!(extreme_heat_indicator(20.0, 35.0), 0);
        assert_eq!(q4_humidity_indicator(80.0, 75.0), 1);
        assert_eq!(q4_humidity_indicator(75.0, 75.0), 0);
        let series: Vec<(String, f64)> =
            (1..=100).map(|v| ("A1".to_string(), v as f64)).collect();
        let thresholds = q4_humidity_thresholds(&series);
        assert_relative_eq!(thresholds["A1"], 75.25, epsilon = 1e-12);
        assert_eq!(q4_humidity_indicator(75.3, thresholds["A1"]), 1);
    }

    fn flags(counts: &[usize], stations: usize) -> Vec<Vec<bool>> {
        counts
            .iter()
            .map(|&c| (0..stations).map(|s| s < c).collect())
            .collect()
    }

    #[test]
    fn heatwave_runs_require_threshold_and_length() {
        let run = heatwave_indicator(&flags(&[1, 1, 1, 0], 10), 10, 0.10, 3).unwrap();
        assert_eq!(run, vec![1, 1, 1, 0]);
        let broken = heatwave_indicator(&flags(&[1, 1, 0, 1, 1], 10), 10, 0.10, 3).unwrap();
        assert_eq!(broken, vec![0, 0, 0, 0, 0]);
        let quiet = heatwave_indicator(&flags(&[0, 0, 0], 10), 10, 0.10, 3).unwrap();
        assert_eq!(quiet, vec![0, 0, 0]);
        // Threshold is a ceiling: 10% of 25 stations needs ceil(2.5) = 3.
        let below = heatwave_indicator(&flags(&[2, 2, 2], 25), 25, 0.10, 3).unwrap();
        assert_eq!(below, vec![0, 0, 0]);
        let at = heatwave_indicator(&flags(&[3, 3, 3], 25), 25, 0.10, 3).unwrap();
        assert_eq!(at, vec![1, 1, 1]);
        // A long run flags every member day, including a 5-day episode.
        let long = heatwave_indicator(&flags(&[1, 1, 1, 1, 1, 0, 1], 10), 10, 0.10, 3).unwrap();
        assert_eq!(long, vec![1, 1, 1, 1, 1, 0, 0]);
        // Station-set size is checked per day.
        let mut bad = flags(&[1, 1, 1], 10);
        bad[1].pop();
        assert!(matches!(
            heatwave_indicator(&bad, 10, 0.10, 3),
            Err(ExposureError::InconsistentStationSet { day: 1, got: 9, expected: 10 })
        ));
    }

    #[test]
    fn heatwave_ignores_which_stations_flagged() {
        // Same counts, different stations -> same output.
        let a = vec![
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
        ];
        let b = vec![
            vec![false, false, true],
            vec![true, false, false],
            vec![false, true, false],
        ];
        let ra = heatwave_indicator(&a, 3, 0.10, 3).unwrap();
        let rb = heatwave_indicator(&b, 3, 0.10, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra, vec![1, 1, 1]);
        // Flipping a flag on a day already over threshold changes nothing.
        let mut c = a.clone();
        c[1][2] = true;
        assert_eq!(heatwave_indicator(&c, 3, 0.10, 3).unwrap(), ra);
    }

    #[test]
    fn lag_operators_exclude_the_current_day() {
        let series: Vec<Option<f64>> =
            vec![Some(10.0), Some(20.0), Some(30.0), Some(999.0)];
        assert_eq!(lagged_mean(&series, 3, 3), Some(20.0));
        assert_eq!(lagged_mean(&series, 3, 1), Some(30.0));
        let week: Vec<Option<f64>> = (1..=8).map(|v| Some(v as f64)).collect();
        assert_eq!(lagged_mean(&week, 7, 7), Some(4.0));
        // Any gap in the window is missing.
        let gappy = vec![Some(10.0), None, Some(30.0), Some(40.0)];
        assert_eq!(lagged_mean(&gappy, 3, 3), None);
        assert_eq!(lagged_mean(&gappy, 3, 1), Some(30.0));
        // Window extending before the series is missing.
        assert_eq!(lagged_mean(&series, 2, 3), None);

        let flags: Vec<Option<u8>> = vec![Some(1), Some(0), None, Some(1)];
        assert_eq!(lagged_indicator(&flags, 3, 3), Some(1));
        assert_eq!(lagged_indicator(&flags, 3, 1), None);
        assert_eq!(lagged_indicator(&flags, 1, 3), None);
    }

    #[test]
    #[should_panic(expected = "lag must be positive")]
    fn zero_lag_is_rejected() {
        lagged_indicator(&[Some(1)], 0, 0);
    }

    #[test]
    fn pollutant_boundaries_are_lower_inclusive() {
        use Pollutant::*;
        assert_eq!(pollutant_category(14.999, Pm10).unwrap(), 1);
        assert_eq!(pollutant_category(15.0, Pm10).unwrap(), 2);
        assert_eq!(pollutant_category(44.999, Pm10).unwrap(), 2);
        assert_eq!(pollutant_category(45.0, Pm10).unwrap(), 3);
        assert_eq!(pollutant_category(9.9, No2).unwrap(), 1);
        assert_eq!(pollutant_category(10.0, No2).unwrap(), 2);
        assert_eq!(pollutant_category(25.0, No2).unwrap(), 3);
        assert_eq!(pollutant_category(59.9, O3).unwrap(), 1);
        assert_eq!(pollutant_category(75.0, O3).unwrap(), 2);
        assert_eq!(pollutant_category(100.0, O3).unwrap(), 3);
        assert_eq!(pollutant_category(119.9, O3).unwrap(), 3);
        assert_eq!(pollutant_category(120.0, O3).unwrap(), 4);
        assert_eq!(pollutant_category(0.0, O3).unwrap(), 1);
        assert!(matches!(
            pollutant_category(-0.1, Pm10),
            Err(ExposureError::InvalidPollutantValue(_))
        ));
        assert!(pollutant_category(f64::NAN, No2).is_err());
        assert_eq!(Pm10.category_count(), 3);
        assert_eq!(O3.category_count(), 4);
    }

    #[test]
    fn quartiles_tie_toward_the_lower_category() {
        let values: Vec<(String, f64)> =
            (1..=8).map(|v| (format!("A{v}"), v as f64)).collect();
        let cats = quartile_categorize(&values).unwrap();
        let got: Vec<u8> = (1..=8).map(|v| cats[&format!("A{v}")]).collect();
        assert_eq!(got, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        // A value exactly at a cut goes to the lower category.
        let mixed = vec![
            ("a".to_string(), 1.0),
            ("b".to_string(), 2.0),
            ("c".to_string(), 3.0),
            ("d".to_string(), 4.0),
            ("e".to_string(), 2.5), // exactly the 50% cut of {1,2,2.5,3,4}
        ];
        let cats = quartile_categorize(&mixed).unwrap();
        assert_eq!(cats["e"], 2);
        assert!(matches!(
            quartile_categorize(&[
                ("a".to_string(), 1.0),
                ("b".to_string(), 1.0),
                ("c".to_string(), 2.0),
                ("d".to_string(), 3.0),
            ]),
            Err(ExposureError::DegenerateQuartiles(3))
        ));
    }
}

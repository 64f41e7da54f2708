//! Station metadata, intraday-to-daily reduction, and the altitude filter.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

/// Stations at or above this altitude are excluded from all field work.
pub const HIGH_STATION_CUTOFF_M: f64 = 1500.0;

/// A monitoring station (meteorological or air-quality) on the planar km
/// grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub altitude_m: f64,
}

/// The measured channels a station reading can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    /// Semi-hourly maximum-temperature channel (°C).
    Tmax,
    /// Semi-hourly minimum-temperature channel (°C).
    Tmin,
    /// Relative humidity (%).
    Rh,
    /// PM10 (µg/m³).
    Pm10,
    /// NO2 (µg/m³).
    No2,
    /// Ozone: either hourly values to be reduced to the daily maximum 8-hour
    /// moving average, or a single already-reduced daily value (µg/m³).
    O3_8h,
}

impl Variable {
    pub fn as_str(self) -> &'static str {
        match self {
            Variable::Tmax => "tmax",
            Variable::Tmin => "tmin",
            Variable::Rh => "rh",
            Variable::Pm10 => "pm10",
            Variable::No2 => "no2",
            Variable::O3_8h => "o3_8h",
        }
    }

    pub fn parse(s: &str) -> Option<Variable> {
        Some(match s {
            "tmax" => Variable::Tmax,
            "tmin" => Variable::Tmin,
            "rh" => Variable::Rh,
            "pm10" => Variable::Pm10,
            "no2" => Variable::No2,
            "o3_8h" => Variable::O3_8h,
            _ => return None,
        })
    }
}

/// Reduce one station's intraday series for one variable to a daily value.
///
/// Temperature, humidity, and the daily-mean pollutants reduce by arithmetic
/// mean of the finite readings. Ozone reduces to the maximum over the day of
/// trailing 8-hour moving averages over consecutive hourly values; a single
/// reading passes through as an already-reduced daily value. Returns `None`
/// when the day has no usable value (all readings missing, or no 8-hour
/// ozone window can be formed).
pub fn reduce_to_daily(readings: &[(NaiveDateTime, f64)], variable: Variable) -> Option<f64> {
    let finite: Vec<(NaiveDateTime, f64)> = readings
        .iter()
        .filter(|(_, v)| v.is_finite())
        .copied()
        .collect();
    if finite.is_empty() {
        return None;
    }
    match variable {
        Variable::Tmax | Variable::Tmin | Variable::Rh | Variable::Pm10 | Variable::No2 => {
            let sum: f64 = finite.iter().map(|(_, v)| v).sum();
            Some(sum / finite.len() as f64)
        }
        Variable::O3_8h => {
            if finite.len() == 1 {
                return Some(finite[0].1);
            }
            if finite.len() < 8 {
                return None;
            }
            let mut sorted = finite;
            sorted.sort_by_key(|(t, _)| *t);
            // Trailing 8-hour windows over consecutive hourly values.
            let mut best: Option<f64> = None;
            for end in 7..sorted.len() {
                let window = &sorted[end - 7..=end];
                let consecutive = window.windows(2).all(|w| {
                    let dt = w[1].0 - w[0].0;
                    dt == chrono::Duration::hours(1)
                });
                if consecutive {
                    let mean = window.iter().map(|(_, v)| v).sum::<f64>() / 8.0;
                    best = Some(best.map_or(mean, |b: f64| b.max(mean)));
                }
            }
            best
        }
    }
}

/// Remove stations at or above [`HIGH_STATION_CUTOFF_M`]; returns the kept
/// stations and the number removed.
pub fn exclude_high_stations(stations: Vec<Station>) -> (Vec<Station>, usize) {
    let before = stations.len();
    let kept: Vec<Station> = stations
        .into_iter()
        .filter(|s| s.altitude_m < HIGH_STATION_CUTOFF_M)
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Convenience for tests and fixtures: an intraday timestamp on a fixed day.
#[cfg(test)]
pub(crate) fn at_hour(hour: u32) -> NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2015, 7, 14)
        .unwrap()
        .and_hms_opt(hour, 0, 0)
        .unwrap()
}

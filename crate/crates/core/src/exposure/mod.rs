//! Exposure engineering: station series to daily values, daily values to
//! area-level fields, and fields to the model's indicator variables.

mod daily;
mod field;
mod indicators;

pub use daily::{exclude_high_stations, reduce_to_daily, Station, Variable, HIGH_STATION_CUTOFF_M};
pub use field::{fit_field_params, predict_daily_field, DayReadings, FieldPrediction};
pub use indicators::{
    compute_trigger_table, default_reference_years, extreme_heat_indicator, heatwave_indicator,
    lagged_indicator, lagged_mean, pollutant_category, q4_humidity_indicator,
    q4_humidity_thresholds, quartile_categorize, Pollutant, TriggerTable,
    DEFAULT_HEATWAVE_FRACTION, DEFAULT_HEATWAVE_MIN_RUN, DEFAULT_TRIGGER_MIN_OBS,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExposureError {
    #[error("field prediction needs at least 3 stations, got {0}")]
    TooFewStations(usize),
    #[error("stations {0} and {1} share coordinates")]
    DuplicateStations(usize, usize),
    #[error("field hyperparameter fit failed: {0}")]
    FieldFit(String),
    #[error("covariance factorization failed: {0}")]
    Factorization(String),
    #[error("trigger cell (area {area}, month {month}) has only {got} reference days (need {need})")]
    InsufficientTriggerData {
        area: String,
        month: u32,
        got: usize,
        need: usize,
    },
    #[error("no trigger temperature for (area {0}, month {1})")]
    MissingTrigger(String, u32),
    #[error("pollutant value must be nonnegative and finite, got {0}")]
    InvalidPollutantValue(f64),
    #[error("quartile categorization needs at least 4 distinct values, got {0}")]
    DegenerateQuartiles(usize),
    #[error("heatwave day {day} reports {got} station flags, expected {expected}")]
    InconsistentStationSet {
        day: usize,
        got: usize,
        expected: usize,
    },
    #[error("no humidity data for area {0}")]
    MissingHumidityData(String),
}

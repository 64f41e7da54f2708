//! CSV readers and writers for every pipeline artifact.
//!
//! All files carry a header row; dates are ISO-8601 (`2016-07-14`, datetimes
//! `2016-07-14T13:30:00`); numbers use a decimal point and no thousands
//! separators. Floats are written in the shortest form that parses back to
//! the identical bits, so write-then-read round-trips exactly.
//!
//! Input schemas:
//! - areas: `area_id,x_km,y_km`
//! - population: `area_id,year,population`
//! - tracts: `tract_id,area_id,year,variable,value,population` with
//!   `variable` one of `income_eur`, `gini_pct`, `pct_65_plus`
//! - deaths: `area_id,date,deaths_all,deaths_65,deaths_85`
//! - stations: `station_id,x_km,y_km,altitude_m`
//! - readings: `station_id,datetime,variable,value` with `variable` one of
//!   `tmax`, `tmin`, `rh`, `pm10`, `no2`, `o3_8h`; an empty `value` is a
//!   missing reading
//!
//! Pipeline artifacts (written by one command, read by the next):
//! - exposures: the [`DailyAreaExposure`] fields
//! - triggers: `area_id,month,trigger_c`
//! - indicators: long format `kind,key,value` with `kind` either
//!   `q4_threshold` (key = area, value = humidity threshold) or `heatwave`
//!   (key = date, value = 0/1)
//!
//! Report outputs (write-only):
//! - panel: the [`PanelRow`] fields
//! - rr_table: `term,rr,cri_lower,cri_upper,probs`
//! - lag_waic: `lag,waic,p_waic,lppd,rows`
//! - ladder: `step,covariate,rr,cri_lower,cri_upper,probs`

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    aggregate_annual_covariates, AreaUnit, CensusTractValue, CovariateKind, DailyAreaExposure,
    DataError, DeathCounts, IndicatorInputs, Panel,
};
use crate::exposure::{Station, TriggerTable, Variable};
use crate::inference::RrRow;
use crate::selection::{LadderResult, LagSearchResult};

#[derive(Debug, Error)]
pub enum IoError {
    /// A file could not be opened, parsed, or written; the source names the
    /// record position.
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    /// A record parsed but violates the schema's cross-record rules.
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn csv_err(path: &Path, source: csv::Error) -> IoError {
    IoError::Csv { path: path.to_path_buf(), source }
}

fn invalid(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Invalid { path: path.to_path_buf(), message: message.into() }
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for record in reader.deserialize() {
        out.push(record.map_err(|e| csv_err(path, e))?);
    }
    Ok(out)
}

fn write_records<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| csv_err(path, csv::Error::from(e)))
}

#[derive(Debug, Deserialize)]
struct AreaRecord {
    area_id: String,
    x_km: f64,
    y_km: f64,
}

#[derive(Debug, Deserialize)]
struct PopulationRecord {
    area_id: String,
    year: i32,
    population: u64,
}

#[derive(Debug, Deserialize)]
struct TractRecord {
    tract_id: String,
    area_id: String,
    year: i32,
    variable: String,
    value: f64,
    population: u64,
}

/// Read only the area identifiers and centroids (enough for field
/// prediction, which needs no populations or covariates).
pub fn read_area_centroids(path: &Path) -> Result<Vec<(String, (f64, f64))>, IoError> {
    let areas: Vec<AreaRecord> = read_records(path)?;
    let mut ids = BTreeSet::new();
    for a in &areas {
        if !ids.insert(a.area_id.clone()) {
            return Err(invalid(path, format!("duplicate area {}", a.area_id)));
        }
    }
    Ok(areas.into_iter().map(|a| (a.area_id, (a.x_km, a.y_km))).collect())
}

/// Assemble area units from the three area-level inputs: centroids, annual
/// populations, and census-tract covariate values (population-weighted into
/// annual area covariates).
///
/// Rejected here: duplicate area ids, duplicate (area, year) population
/// rows, rows referencing an area absent from the areas file, and unknown
/// covariate names. Year coverage is not checked — the panel assembler
/// validates it against the years actually modeled.
pub fn read_area_units(
    areas_path: &Path,
    population_path: &Path,
    tracts_path: &Path,
) -> Result<Vec<AreaUnit>, IoError> {
    let areas: Vec<AreaRecord> = read_records(areas_path)?;
    let mut ids = BTreeSet::new();
    for a in &areas {
        if !ids.insert(a.area_id.clone()) {
            return Err(invalid(areas_path, format!("duplicate area {}", a.area_id)));
        }
    }

    let mut populations: BTreeMap<String, BTreeMap<i32, u64>> = BTreeMap::new();
    for p in read_records::<PopulationRecord>(population_path)? {
        if !ids.contains(&p.area_id) {
            return Err(invalid(
                population_path,
                format!("population row for unknown area {}", p.area_id),
            ));
        }
        let by_year = populations.entry(p.area_id.clone()).or_default();
        if by_year.insert(p.year, p.population).is_some() {
            return Err(invalid(
                population_path,
                format!("duplicate population row for area {} year {}", p.area_id, p.year),
            ));
        }
    }

    let mut tracts = Vec::new();
    for t in read_records::<TractRecord>(tracts_path)? {
        let kind = CovariateKind::parse(&t.variable).ok_or_else(|| {
            invalid(
                tracts_path,
                format!(
                    "tract {}: unknown variable {:?} (expected income_eur, gini_pct, or pct_65_plus)",
                    t.tract_id, t.variable
                ),
            )
        })?;
        if !ids.contains(&t.area_id) {
            return Err(invalid(
                tracts_path,
                format!("tract {} references unknown area {}", t.tract_id, t.area_id),
            ));
        }
        tracts.push((
            kind,
            CensusTractValue {
                tract_id: t.tract_id,
                parent_area_id: t.area_id,
                year: t.year,
                value: t.value,
                population: t.population,
            },
        ));
    }
    let mut covariates = aggregate_annual_covariates(&tracts)?;

    Ok(areas
        .into_iter()
        .map(|a| {
            let covariates_by_year = {
                let mut by_year = BTreeMap::new();
                let keys: Vec<(String, i32)> = covariates
                    .range((a.area_id.clone(), i32::MIN)..=(a.area_id.clone(), i32::MAX))
                    .map(|(k, _)| k.clone())
                    .collect();
                for key in keys {
                    by_year.insert(key.1, covariates.remove(&key).unwrap());
                }
                by_year
            };
            AreaUnit {
                population_by_year: populations.remove(&a.area_id).unwrap_or_default(),
                area_id: a.area_id,
                centroid: (a.x_km, a.y_km),
                covariates_by_year,
            }
        })
        .collect())
}

/// Write area units back out as the three input files, inverting
/// [`read_area_units`]. Each area-year covariate becomes a single synthetic
/// tract whose population is a power of two, so the population weighting
/// `value * pop / pop` reproduces the value bit-exactly on re-read. Intended
/// for synthetic-data exports; real tract tables flow the other way only.
pub fn write_area_files(
    areas_path: &Path,
    population_path: &Path,
    tracts_path: &Path,
    units: &[AreaUnit],
) -> Result<(), IoError> {
    #[derive(Serialize)]
    struct AreaOut<'a> {
        area_id: &'a str,
        x_km: f64,
        y_km: f64,
    }
    #[derive(Serialize)]
    struct PopulationOut<'a> {
        area_id: &'a str,
        year: i32,
        population: u64,
    }
    #[derive(Serialize)]
    struct TractOut<'a> {
        tract_id: String,
        area_id: &'a str,
        year: i32,
        variable: &'static str,
        value: f64,
        population: u64,
    }

    write_records(
        areas_path,
        units.iter().map(|u| AreaOut {
            area_id: &u.area_id,
            x_km: u.centroid.0,
            y_km: u.centroid.1,
        }),
    )?;
    write_records(
        population_path,
        units.iter().flat_map(|u| {
            u.population_by_year.iter().map(|(&year, &population)| PopulationOut {
                area_id: &u.area_id,
                year,
                population,
            })
        }),
    )?;
    write_records(
        tracts_path,
        units.iter().flat_map(|u| {
            u.covariates_by_year.iter().flat_map(|(&year, covs)| {
                [
                    (CovariateKind::IncomeEur, covs.income_eur),
                    (CovariateKind::GiniPct, covs.gini_pct),
                    (CovariateKind::Pct65Plus, covs.pct_65_plus),
                ]
                .into_iter()
                .map(move |(kind, value)| TractOut {
                    tract_id: format!("{}-t0", u.area_id),
                    area_id: &u.area_id,
                    year,
                    variable: kind.as_str(),
                    value,
                    population: 1024,
                })
            })
        }),
    )
}

/// Read daily death counts; the age strata must nest (85+ ≤ 65+ ≤ all).
pub fn read_deaths(path: &Path) -> Result<Vec<DeathCounts>, IoError> {
    let deaths: Vec<DeathCounts> = read_records(path)?;
    for d in &deaths {
        d.validate()?;
    }
    Ok(deaths)
}

pub fn write_deaths(path: &Path, deaths: &[DeathCounts]) -> Result<(), IoError> {
    write_records(path, deaths)
}

pub fn read_stations(path: &Path) -> Result<Vec<Station>, IoError> {
    read_records(path)
}

/// One raw station reading: a timestamped value of a single variable. An
/// empty CSV value parses as a missing reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingRow {
    pub station_id: String,
    pub datetime: NaiveDateTime,
    pub variable: Variable,
    pub value: Option<f64>,
}

pub fn read_readings(path: &Path) -> Result<Vec<ReadingRow>, IoError> {
    read_records(path)
}

pub fn read_exposures(path: &Path) -> Result<Vec<DailyAreaExposure>, IoError> {
    read_records(path)
}

pub fn write_exposures(path: &Path, rows: &[DailyAreaExposure]) -> Result<(), IoError> {
    write_records(path, rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct TriggerRecord {
    area_id: String,
    month: u32,
    trigger_c: f64,
}

pub fn read_triggers(path: &Path) -> Result<TriggerTable, IoError> {
    let records: Vec<TriggerRecord> = read_records(path)?;
    Ok(TriggerTable::from_entries(
        records.into_iter().map(|r| (r.area_id, r.month, r.trigger_c)),
    ))
}

pub fn write_triggers(path: &Path, table: &TriggerTable) -> Result<(), IoError> {
    write_records(
        path,
        table.iter().map(|(area_id, month, trigger_c)| TriggerRecord {
            area_id: area_id.to_string(),
            month,
            trigger_c,
        }),
    )
}

const KIND_Q4: &str = "q4_threshold";
const KIND_HEATWAVE: &str = "heatwave";

#[derive(Debug, Serialize, Deserialize)]
struct IndicatorRecord {
    kind: String,
    key: String,
    value: f64,
}

/// Read the indicator file back into its two tables: per-area fourth-quartile
/// humidity thresholds and region-wide daily heatwave flags. Triggers live in
/// their own file; compose the three into an [`IndicatorInputs`].
pub fn read_indicators(
    path: &Path,
) -> Result<(BTreeMap<String, f64>, BTreeMap<NaiveDate, u8>), IoError> {
    let mut q4 = BTreeMap::new();
    let mut heatwave = BTreeMap::new();
    for r in read_records::<IndicatorRecord>(path)? {
        match r.kind.as_str() {
            KIND_Q4 => {
                if q4.insert(r.key.clone(), r.value).is_some() {
                    return Err(invalid(path, format!("duplicate q4 threshold for {}", r.key)));
                }
            }
            KIND_HEATWAVE => {
                let date = r.key.parse::<NaiveDate>().map_err(|e| {
                    invalid(path, format!("heatwave key {:?} is not a date: {e}", r.key))
                })?;
                if !(r.value == 0.0 || r.value == 1.0) {
                    return Err(invalid(
                        path,
                        format!("heatwave flag for {date} must be 0 or 1, got {}", r.value),
                    ));
                }
                if heatwave.insert(date, r.value as u8).is_some() {
                    return Err(invalid(path, format!("duplicate heatwave flag for {date}")));
                }
            }
            other => {
                return Err(invalid(
                    path,
                    format!("unknown indicator kind {other:?} (expected {KIND_Q4} or {KIND_HEATWAVE})"),
                ))
            }
        }
    }
    Ok((q4, heatwave))
}

/// Write the humidity-threshold and heatwave tables of one
/// [`IndicatorInputs`]; the trigger table goes through [`write_triggers`].
pub fn write_indicators(path: &Path, inputs: &IndicatorInputs) -> Result<(), IoError> {
    let q4 = inputs.q4_thresholds.iter().map(|(area, threshold)| IndicatorRecord {
        kind: KIND_Q4.into(),
        key: area.clone(),
        value: *threshold,
    });
    let heatwave = inputs.heatwave_flags.iter().map(|(date, flag)| IndicatorRecord {
        kind: KIND_HEATWAVE.into(),
        key: date.to_string(),
        value: f64::from(*flag),
    });
    write_records(path, q4.chain(heatwave))
}

/// Write the assembled panel, one row per retained (area, day). The file is
/// an export for inspection; model commands assemble the panel from the raw
/// inputs so the area dictionary and centroids are never lossy.
pub fn write_panel(path: &Path, panel: &Panel) -> Result<(), IoError> {
    write_records(path, &panel.rows)
}

#[derive(Debug, Serialize, Deserialize)]
struct RrRecord {
    term: String,
    rr: f64,
    cri_lower: f64,
    cri_upper: f64,
    probs: f64,
}

/// Write the relative-risk table in design order: `term,rr,cri_lower,
/// cri_upper,probs`.
pub fn write_rr_table(path: &Path, rows: &[RrRow]) -> Result<(), IoError> {
    write_records(
        path,
        rows.iter().map(|r| RrRecord {
            term: r.term.clone(),
            rr: r.rr,
            cri_lower: r.cri_lower,
            cri_upper: r.cri_upper,
            probs: r.probs,
        }),
    )
}

/// Read a relative-risk table back; a zero-width interval marks the row
/// degenerate.
pub fn read_rr_table(path: &Path) -> Result<Vec<RrRow>, IoError> {
    let records: Vec<RrRecord> = read_records(path)?;
    Ok(records
        .into_iter()
        .map(|r| RrRow {
            degenerate: r.cri_lower == r.cri_upper,
            term: r.term,
            rr: r.rr,
            cri_lower: r.cri_lower,
            cri_upper: r.cri_upper,
            probs: r.probs,
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct LagWaicRecord {
    lag: u32,
    waic: f64,
    p_waic: f64,
    lppd: f64,
    rows: usize,
}

/// Write one row per successfully fitted candidate lag, ascending by lag.
pub fn write_lag_waic(path: &Path, result: &LagSearchResult) -> Result<(), IoError> {
    write_records(
        path,
        result.table.iter().map(|r| LagWaicRecord {
            lag: r.lag,
            waic: r.waic,
            p_waic: r.p_waic,
            lppd: r.lppd,
            rows: r.rows,
        }),
    )
}

#[derive(Debug, Serialize)]
struct LadderRecord<'a> {
    step: usize,
    covariate: &'a str,
    rr: f64,
    cri_lower: f64,
    cri_upper: f64,
    probs: f64,
}

/// Write the heat term's relative-risk row at every ladder step, in ladder
/// order (`step` counts from 1).
pub fn write_ladder(path: &Path, result: &LadderResult) -> Result<(), IoError> {
    write_records(
        path,
        result.steps.iter().enumerate().map(|(i, s)| LadderRecord {
            step: i + 1,
            covariate: s.name,
            rr: s.heat.rr,
            cri_lower: s.heat.cri_lower,
            cri_upper: s.heat.cri_upper,
            probs: s.heat.probs,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    use chrono::NaiveDate;
    use tempfile::TempDir;

    fn day(year: i32, month: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(year, month, day).unwrap()
    }

    fn write(dir: &TempDir, name: &str, content: &str) -> PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn reads_area_units_from_the_three_inputs() {
        let dir = TempDir::new().unwrap();
        let areas = write(&dir, "areas.csv", "area_id,x_km,y_km\nA,1.5,2.5\nB,3.0,4.0\n");
        let population = write(
            &dir,
            "population.csv",
            "area_id,year,population\nA,2016,5000\nA,2017,5100\nB,2016,8000\nB,2017,8100\n",
        );
        // Income tracts for A/2016 reproduce the worked aggregate
        // (8·100 + 12·300) / 400 = 11.
        let mut tracts = String::from("tract_id,area_id,year,variable,value,population\n");
        for (area, year) in [("A", 2016), ("A", 2017), ("B", 2016), ("B", 2017)] {
            tracts.push_str(&format!("{area}t1,{area},{year},income_eur,8,100\n"));
            tracts.push_str(&format!("{area}t2,{area},{year},income_eur,12,300\n"));
            tracts.push_str(&format!("{area}t1,{area},{year},gini_pct,30,100\n"));
            tracts.push_str(&format!("{area}t2,{area},{year},gini_pct,32,300\n"));
            tracts.push_str(&format!("{area}t1,{area},{year},pct_65_plus,18,100\n"));
            tracts.push_str(&format!("{area}t2,{area},{year},pct_65_plus,22,300\n"));
        }
        let tracts = write(&dir, "tracts.csv", &tracts);

        let units = read_area_units(&areas, &population, &tracts).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[0].area_id, "A");
        assert_eq!(units[0].centroid, (1.5, 2.5));
        assert_eq!(units[0].population_by_year[&2017], 5100);
        let covs = &units[0].covariates_by_year[&2016];
        assert_eq!(covs.income_eur, 11.0);
        assert_eq!(covs.gini_pct, 31.5);
        assert_eq!(covs.pct_65_plus, 21.0);
        assert_eq!(units[1].covariates_by_year.len(), 2);
        for unit in &units {
            unit.validate(&[2016, 2017]).unwrap();
        }
    }

    #[test]
    fn rejects_inconsistent_area_inputs() {
        let dir = TempDir::new().unwrap();
        let areas = write(&dir, "areas.csv", "area_id,x_km,y_km\nA,1,2\nA,3,4\n");
        let population = write(&dir, "population.csv", "area_id,year,population\nA,2016,5000\n");
        let tracts = write(
            &dir,
            "tracts.csv",
            "tract_id,area_id,year,variable,value,population\nt1,A,2016,income_eur,8,100\n",
        );
        let err = read_area_units(&areas, &population, &tracts).unwrap_err();
        assert!(err.to_string().contains("duplicate area A"), "{err}");

        let areas = write(&dir, "areas.csv", "area_id,x_km,y_km\nA,1,2\n");
        let orphan_pop =
            write(&dir, "population2.csv", "area_id,year,population\nZ,2016,5000\n");
        let err = read_area_units(&areas, &orphan_pop, &tracts).unwrap_err();
        assert!(err.to_string().contains("unknown area Z"), "{err}");
        assert!(err.to_string().contains("population2.csv"), "{err}");

        let bad_kind = write(
            &dir,
            "tracts2.csv",
            "tract_id,area_id,year,variable,value,population\nt1,A,2016,median_age,8,100\n",
        );
        let err = read_area_units(&areas, &population, &bad_kind).unwrap_err();
        assert!(err.to_string().contains("median_age"), "{err}");

        // Missing one covariate kind surfaces the aggregation error.
        let partial = write(
            &dir,
            "tracts3.csv",
            "tract_id,area_id,year,variable,value,population\nt1,A,2016,income_eur,8,100\n",
        );
        let err = read_area_units(&areas, &population, &partial).unwrap_err();
        assert!(matches!(err, IoError::Data(_)), "{err}");
    }

    #[test]
    fn reads_deaths_and_rejects_inverted_strata() {
        let dir = TempDir::new().unwrap();
        let path = write(
            &dir,
            "deaths.csv",
            "area_id,date,deaths_all,deaths_65,deaths_85\nA,2016-07-14,3,2,1\nA,2016-07-15,0,0,0\n",
        );
        let deaths = read_deaths(&path).unwrap();
        assert_eq!(deaths.len(), 2);
        assert_eq!(deaths[0].date, day(2016, 7, 14));
        assert_eq!(deaths[0].deaths_all, 3);

        let bad = write(
            &dir,
            "bad.csv",
            "area_id,date,deaths_all,deaths_65,deaths_85\nA,2016-07-14,1,2,0\n",
        );
        assert!(read_deaths(&bad).is_err());
    }

    #[test]
    fn reads_stations_and_readings() {
        let dir = TempDir::new().unwrap();
        let stations = write(
            &dir,
            "stations.csv",
            "station_id,x_km,y_km,altitude_m\nS1,0.0,0.0,120\nS2,10.0,5.0,1500\n",
        );
        let stations = read_stations(&stations).unwrap();
        assert_eq!(stations.len(), 2);
        assert_eq!(stations[1].altitude_m, 1500.0);

        let readings = write(
            &dir,
            "readings.csv",
            "station_id,datetime,variable,value\n\
             S1,2016-07-14T13:30:00,tmax,33.4\n\
             S1,2016-07-14T14:00:00,tmax,\n\
             S1,2016-07-14T14:00:00,o3_8h,n/a\n",
        );
        assert!(read_readings(&readings).is_err());

        let readings = write(
            &dir,
            "readings2.csv",
            "station_id,datetime,variable,value\n\
             S1,2016-07-14T13:30:00,tmax,33.4\n\
             S1,2016-07-14T14:00:00,tmax,\n\
             S2,2016-07-14T14:00:00,o3_8h,91.5\n",
        );
        let rows = read_readings(&readings).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].variable, Variable::Tmax);
        assert_eq!(rows[0].value, Some(33.4));
        assert_eq!(rows[1].value, None);
        assert_eq!(rows[2].variable, Variable::O3_8h);
        assert_eq!(
            rows[2].datetime,
            day(2016, 7, 14).and_hms_opt(14, 0, 0).unwrap()
        );
    }

    #[test]
    fn exposures_round_trip_bit_exactly() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("exposures.csv");
        // Awkward floats: shortest-representation writing must reproduce the
        // exact bits on re-read.
        let rows = vec![
            DailyAreaExposure {
                area_id: "A".into(),
                date: day(2016, 7, 14),
                tmax_c: 0.1 + 0.2,
                rh_pct: 2.0 / 3.0,
                pm10_ugm3: 1e-17,
                no2_ugm3: 12.300000000000001,
                o3_ugm3: f64::MIN_POSITIVE,
                tmax_sd: 0.0,
                rh_sd: 1.0 / 49.0,
                pm10_sd: 3.141592653589793,
                no2_sd: 1e300,
                o3_sd: 5.55,
            },
            DailyAreaExposure {
                area_id: "B".into(),
                date: day(2016, 9, 30),
                tmax_c: 28.0,
                rh_pct: 60.0,
                pm10_ugm3: 14.999,
                no2_ugm3: 9.999,
                o3_ugm3: 120.0,
                tmax_sd: 0.4,
                rh_sd: 1.2,
                pm10_sd: 0.7,
                no2_sd: 0.3,
                o3_sd: 2.1,
            },
        ];
        write_exposures(&path, &rows).unwrap();
        let back = read_exposures(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].tmax_c.to_bits(), (0.1f64 + 0.2).to_bits());

        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "area_id,date,tmax_c,rh_pct,pm10_ugm3,no2_ugm3,o3_ugm3,\
             tmax_sd,rh_sd,pm10_sd,no2_sd,o3_sd\n"
        ));
    }

    #[test]
    fn triggers_and_indicators_round_trip() {
        let dir = TempDir::new().unwrap();
        let triggers_path = dir.path().join("triggers.csv");
        let table = TriggerTable::from_entries([
            ("A".to_string(), 6, 31.25),
            ("A".to_string(), 7, 34.5),
            ("B".to_string(), 6, 30.0),
        ]);
        write_triggers(&triggers_path, &table).unwrap();
        let back = read_triggers(&triggers_path).unwrap();
        assert_eq!(back.get("A", 7).unwrap(), 34.5);
        assert_eq!(back.len(), 3);

        let indicators_path = dir.path().join("indicators.csv");
        let inputs = IndicatorInputs {
            triggers: table,
            q4_thresholds: BTreeMap::from([("A".to_string(), 75.25), ("B".to_string(), 71.0)]),
            heatwave_flags: BTreeMap::from([
                (day(2016, 7, 14), 1),
                (day(2016, 7, 15), 0),
            ]),
        };
        write_indicators(&indicators_path, &inputs).unwrap();
        let (q4, heatwave) = read_indicators(&indicators_path).unwrap();
        assert_eq!(q4, inputs.q4_thresholds);
        assert_eq!(heatwave, inputs.heatwave_flags);

        let bad = write(&dir, "bad.csv", "kind,key,value\nheatwave,2016-07-14,2\n");
        assert!(read_indicators(&bad).unwrap_err().to_string().contains("0 or 1"));
        let bad = write(&dir, "bad2.csv", "kind,key,value\ntrigger,A,31.0\n");
        assert!(read_indicators(&bad).unwrap_err().to_string().contains("unknown indicator kind"));
    }

    #[test]
    fn report_writers_emit_the_documented_headers() {
        use crate::selection::{LagWaicRow, LadderStep, LadderVerdict};
        use crate::model::ModelSpec;

        let dir = TempDir::new().unwrap();
        let rr_path = dir.path().join("rr_table.csv");
        let row = RrRow {
            term: "extreme_heat".into(),
            rr: 1.3401,
            cri_lower: 0.9107,
            cri_upper: 1.9719,
            probs: 0.931,
            degenerate: false,
        };
        write_rr_table(&rr_path, &[row.clone()]).unwrap();
        let text = fs::read_to_string(&rr_path).unwrap();
        assert_eq!(
            text,
            "term,rr,cri_lower,cri_upper,probs\nextreme_heat,1.3401,0.9107,1.9719,0.931\n"
        );

        let lag_path = dir.path().join("lag_waic.csv");
        let search = LagSearchResult {
            best_lag: 7,
            tie: false,
            table: vec![LagWaicRow { lag: 7, waic: 1234.5, p_waic: 8.25, lppd: -609.0, rows: 976 }],
            failures: vec![],
            rows_used: 976,
        };
        write_lag_waic(&lag_path, &search).unwrap();
        let text = fs::read_to_string(&lag_path).unwrap();
        assert_eq!(text, "lag,waic,p_waic,lppd,rows\n7,1234.5,8.25,-609.0,976\n");

        let ladder_path = dir.path().join("ladder.csv");
        let ladder = LadderResult {
            steps: vec![LadderStep { name: "heat-only", spec: ModelSpec::default(), heat: row }],
            verdict: LadderVerdict::Persistent,
        };
        write_ladder(&ladder_path, &ladder).unwrap();
        let text = fs::read_to_string(&ladder_path).unwrap();
        assert_eq!(
            text,
            "step,covariate,rr,cri_lower,cri_upper,probs\n1,heat-only,1.3401,0.9107,1.9719,0.931\n"
        );
    }

    #[test]
    fn panel_export_writes_one_row_per_retained_cell() {
        use crate::model::{FixedTerm, ModelSpec};
        use crate::simulate::{generate_panel, SimulationConfig};

        let config = SimulationConfig {
            n_areas: 4,
            years: vec![2016, 2017],
            // A tiny fixture cannot guarantee pollutant-category occupancy.
            spec: ModelSpec::default()
                .with_fixed_terms(vec![FixedTerm::Intercept, FixedTerm::ExtremeHeat]),
            ..SimulationConfig::default()
        };
        let data = generate_panel(&config, 7).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel(&path, &data.panel).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "area_id,date,outcome,extreme_heat_lagged,q4_humidity_lagged,pm10_cat,no2_cat,\
             o3_cat,income_q,gini_q,pct65_q,log_offset,year_index,month_index,area_index"
        );
        assert_eq!(lines.count(), data.panel.rows.len());
        assert_eq!(data.panel.rows.len(), 4 * 2 * 122);
    }
}

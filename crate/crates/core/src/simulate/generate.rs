//! Synthetic data drawn from the generative model, routed through the real
//! exposure and panel-assembly code so simulated panels exercise the same
//! paths as ingested data.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson, StandardNormal};

use crate::data::{
    assemble_panel, AnnualCovariates, AreaUnit, DailyAreaExposure, DeathCounts, IndicatorInputs,
    Panel, PanelSettings,
};
use crate::exposure::{
    compute_trigger_table, heatwave_indicator, q4_humidity_thresholds, DEFAULT_HEATWAVE_FRACTION,
    DEFAULT_HEATWAVE_MIN_RUN,
};
use crate::model::{
    build_design, cyclic_rw1_precision, matern_covariance_matrix, rw1_precision, FixedTerm,
    MaternParams, ModelSpec, RandomEffect,
};

use super::SimulateError;

/// Everything needed to draw one synthetic data set.
#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// Number of areas (4..=999; quartile covariates need 4 distinct values).
    pub n_areas: usize,
    pub years: Vec<i32>,
    /// The generative model: terms, lag, heat kind, random effects, offset.
    pub spec: ModelSpec,
    /// Fixed-effect truth by design-column name ("intercept",
    /// "extreme_heat", "o3_cat3", ...); unnamed columns are zero.
    pub coefficients: Vec<(String, f64)>,
    pub size: f64,
    pub zero_weight: f64,
    pub tau_area_iid: f64,
    pub tau_year_rw1: f64,
    pub tau_month_cyclic: f64,
    pub matern_sigma: f64,
    pub matern_range_km: f64,
    /// Ozone response (µg/m³ per °C) to the shared synoptic temperature
    /// anomaly. Zero keeps ozone independent of heat; positive values plant
    /// the confounding channel.
    pub o3_heat_coupling: f64,
    /// Days of pre-June exposure coverage. At least the largest lag you will
    /// fit keeps every summer day in the panel; smaller buffers exercise the
    /// lag-window drop rule.
    pub exposure_buffer_days: u32,
    /// Synthetic station network behind the heatwave flags.
    pub n_stations: usize,
    /// Minimum observations per (area, month) trigger cell; lower it for
    /// single-summer runs where the May buffer is short.
    pub trigger_min_obs: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        // Main effects only: the generative truth carries no interactions,
        // and interaction design columns would hinge on rare joint occupancy.
        let main_effects: Vec<FixedTerm> = FixedTerm::full_set()
            .into_iter()
            .filter(|t| !t.is_interaction())
            .collect();
        SimulationConfig {
            n_areas: 30,
            years: vec![2015, 2016, 2017, 2018],
            spec: ModelSpec::default().with_fixed_terms(main_effects),
            coefficients: vec![
                ("intercept".into(), -9.7),
                ("extreme_heat".into(), 0.15),
            ],
            size: 14.0,
            zero_weight: 0.93,
            tau_area_iid: 45.0,
            tau_year_rw1: 60.0,
            tau_month_cyclic: 60.0,
            matern_sigma: 0.12,
            matern_range_km: 40.0,
            o3_heat_coupling: 0.0,
            exposure_buffer_days: 16,
            n_stations: 20,
            trigger_min_obs: 20,
        }
    }
}

/// Realized generative state: what recovery tests compare estimates against.
#[derive(Debug, Clone)]
pub struct SimulationTruth {
    pub seed: u64,
    /// Design-column order of `coefficients`.
    pub coefficient_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub size: f64,
    pub zero_weight: f64,
    pub tau_area_iid: f64,
    pub tau_year_rw1: f64,
    pub tau_month_cyclic: f64,
    pub matern_sigma: f64,
    pub matern_range_km: f64,
    /// Realized effect vectors (empty when the effect is not in the spec);
    /// the walk vectors are replicate-major, areas outermost.
    pub area_iid: Vec<f64>,
    pub year_rw1: Vec<f64>,
    pub month_cyclic: Vec<f64>,
    pub matern: Vec<f64>,
    /// Per-panel-row linear predictor (offset included) under the truth.
    pub eta: Vec<f64>,
    /// Truth value of one coefficient by name.
    pub coefficient_by_name: BTreeMap<String, f64>,
}

/// A complete synthetic data set: the raw tables, the indicator inputs
/// derived from them, the assembled panel, and the generative truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub panel: Panel,
    pub truth: SimulationTruth,
    pub areas: Vec<AreaUnit>,
    pub deaths: Vec<DeathCounts>,
    pub exposures: Vec<DailyAreaExposure>,
    pub indicators: IndicatorInputs,
    pub settings: PanelSettings,
}

impl SimulatedData {
    /// Re-assemble the stored raw tables under another spec (a different lag
    /// or heat kind, say). This is the panel builder a lag search wants.
    pub fn reassemble(&self, spec: &ModelSpec) -> Result<Panel, crate::data::DataError> {
        assemble_panel(
            &self.areas,
            &self.deaths,
            &self.exposures,
            &self.indicators,
            spec,
            &self.settings,
        )
    }
}

// Schematic weather and pollution constants: seasonal temperature bump,
// shared synoptic AR(1), per-pollutant AR(1) plus noise, and ozone episode
// spells. Chosen so every WHO category occurs in desk-scale panels.
const SEASON_BASE_C: f64 = 24.0;
const SEASON_AMPLITUDE_C: f64 = 8.0;
const SEASON_PEAK_DOY: f64 = 201.0;
const SEASON_WIDTH_DAYS: f64 = 40.0;
const SYNOPTIC_PHI: f64 = 0.75;
const SYNOPTIC_SD: f64 = 1.8;
const AREA_TEMP_GRADIENT_PER_KM: f64 = 0.03;
const AREA_TEMP_SD: f64 = 0.8;
const DAY_TEMP_SD: f64 = 1.2;
const STATION_OFFSET_SD: f64 = 1.5;
const STATION_DAY_SD: f64 = 1.0;
const RH_BASE_PCT: f64 = 58.0;
const RH_AREA_SD: f64 = 6.0;
const RH_DAY_SD: f64 = 10.0;
const PM10_BASE: f64 = 28.0;
const PM10_AREA_SD: f64 = 5.0;
const PM10_PHI: f64 = 0.6;
const PM10_AR_SD: f64 = 5.0;
const PM10_DAY_SD: f64 = 7.0;
const NO2_BASE: f64 = 17.0;
const NO2_AREA_SD: f64 = 4.0;
const NO2_PHI: f64 = 0.6;
const NO2_AR_SD: f64 = 3.5;
const NO2_DAY_SD: f64 = 4.5;
const O3_BASE: f64 = 82.0;
const O3_AREA_SD: f64 = 6.0;
const O3_PHI: f64 = 0.7;
const O3_AR_SD: f64 = 6.0;
const O3_DAY_SD: f64 = 8.0;
const O3_EPISODE_START: f64 = 0.06;
const O3_EPISODE_STAY: f64 = 0.75;
const O3_EPISODE_LIFT: f64 = 50.0;

struct Ar1 {
    phi: f64,
    sd: f64,
    state: f64,
}

impl Ar1 {
    fn new(phi: f64, sd: f64, rng: &mut ChaCha8Rng) -> Ar1 {
        let stationary = sd / (1.0 - phi * phi).sqrt();
        Ar1 {
            phi,
            sd,
            state: normal(rng, stationary),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        self.state = self.phi * self.state + normal(rng, self.sd);
        self.state
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    rng.sample::<f64, _>(StandardNormal) * sd
}

/// Generated exposure dates for one year: the pre-June buffer through
/// September 30.
fn generated_days(year: i32, buffer: u32) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(year, 6, 1).unwrap() - Days::new(u64::from(buffer));
    let end = NaiveDate::from_ymd_opt(year, 9, 30).unwrap();
    let mut days = Vec::new();
    let mut d = start;
    while d <= end {
        days.push(d);
        d = d.succ_opt().unwrap();
    }
    days
}

fn seasonal_mean(date: NaiveDate) -> f64 {
    let doy = chrono::Datelike::ordinal(&date) as f64;
    let z = (doy - SEASON_PEAK_DOY) / SEASON_WIDTH_DAYS;
    SEASON_BASE_C + SEASON_AMPLITUDE_C * (-z * z).exp()
}

/// One intrinsic-prior draw per replicate: spectral coordinates of the
/// structure's non-null directions, scaled by `1/sqrt(tau * lambda)`.
/// Replicates concatenate in order, matching the latent layout.
fn sample_constrained(
    structure: &DMatrix<f64>,
    tau: f64,
    replicates: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let m = structure.nrows();
    let eig = SymmetricEigen::new(structure.clone());
    let max_l = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(replicates * m);
    for _ in 0..replicates {
        let mut u = vec![0.0f64; m];
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l <= 1e-9 * max_l {
                continue;
            }
            let z = normal(rng, 1.0) / (tau * l).sqrt();
            for (j, uj) in u.iter_mut().enumerate() {
                *uj += eig.eigenvectors[(j, i)] * z;
            }
        }
        out.extend_from_slice(&u);
    }
    out
}

fn validate_config(config: &SimulationConfig) -> Result<(), SimulateError> {
    let bad = |msg: String| Err(SimulateError::InvalidConfig(msg));
    if !(4..=999).contains(&config.n_areas) {
        return bad(format!("n_areas must be 4..=999, got {}", config.n_areas));
    }
    if config.years.is_empty() {
        return bad("years must be nonempty".into());
    }
    config
        .spec
        .validate()
        .map_err(|e| SimulateError::InvalidConfig(e.to_string()))?;
    if !(config.size > 0.0 && config.size.is_finite()) {
        return bad(format!("size must be positive, got {}", config.size));
    }
    if !(config.zero_weight > 0.0 && config.zero_weight <= 1.0) {
        return bad(format!(
            "zero_weight must be in (0, 1], got {}",
            config.zero_weight
        ));
    }
    for (name, tau) in [
        ("tau_area_iid", config.tau_area_iid),
        ("tau_year_rw1", config.tau_year_rw1),
        ("tau_month_cyclic", config.tau_month_cyclic),
    ] {
        if !(tau > 0.0 && tau.is_finite()) {
            return bad(format!("{name} must be positive, got {tau}"));
        }
    }
    if !(config.matern_sigma >= 0.0 && config.matern_sigma.is_finite()) {
        return bad(format!(
            "matern_sigma must be nonnegative, got {}",
            config.matern_sigma
        ));
    }
    if !(config.matern_range_km > 0.0 && config.matern_range_km.is_finite()) {
        return bad(format!(
            "matern_range_km must be positive, got {}",
            config.matern_range_km
        ));
    }
    if !config.o3_heat_coupling.is_finite() {
        return bad("o3_heat_coupling must be finite".into());
    }
    if config.exposure_buffer_days > 90 {
        return bad(format!(
            "exposure_buffer_days must be at most 90, got {}",
            config.exposure_buffer_days
        ));
    }
    if config.n_stations < 3 {
        return bad(format!(
            "n_stations must be at least 3, got {}",
            config.n_stations
        ));
    }
    if config.trigger_min_obs < 5 {
        return bad(format!(
            "trigger_min_obs must be at least 5, got {}",
            config.trigger_min_obs
        ));
    }
    Ok(())
}

fn draw_count(rng: &mut ChaCha8Rng, mu: f64, size: f64, zero_weight: f64) -> u64 {
    if zero_weight < 1.0 && rng.random::<f64>() >= zero_weight {
        return 0;
    }
    let lambda = Gamma::new(size, mu / size)
        .expect("validated shape and scale")
        .sample(rng);
    if lambda <= 1e-12 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as u64
}

/// Draw one synthetic data set.
///
/// Covariate processes are schematic: a seasonal temperature bump with a
/// spatial gradient and a shared synoptic AR(1), pollutants as AR(1)-plus-
/// noise around typical urban levels (ozone optionally coupled to the
/// synoptic anomaly and subject to multi-day episode spells), humidity as
/// area-shifted noise. Triggers, humidity thresholds, and heatwave flags are
/// computed from the generated series by the real exposure code; the panel
/// is assembled twice through the real assembly path — once with zero counts
/// to materialize the design, then with counts drawn from the model at the
/// configured truth.
pub fn generate_panel(
    config: &SimulationConfig,
    seed: u64,
) -> Result<SimulatedData, SimulateError> {
    validate_config(config)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    // Phase sub-streams in a fixed draw order, so each phase is internally
    // deterministic regardless of the others' draw counts.
    let mut rng_area = ChaCha8Rng::seed_from_u64(master.random());
    let mut rng_weather = ChaCha8Rng::seed_from_u64(master.random());
    let mut rng_station = ChaCha8Rng::seed_from_u64(master.random());
    let mut rng_effects = ChaCha8Rng::seed_from_u64(master.random());
    let mut rng_counts = ChaCha8Rng::seed_from_u64(master.random());

    let mut years = config.years.clone();
    years.sort_unstable();
    years.dedup();

    // Areas: centroids on a 100 km square, stable populations, annual
    // covariates with enough spread for quartiles.
    let mut areas = Vec::with_capacity(config.n_areas);
    for i in 0..config.n_areas {
        let centroid = (
            rng_area.random_range(0.0..100.0),
            rng_area.random_range(0.0..100.0),
        );
        let population = rng_area.random_range(4_000u64..=20_000);
        let mut population_by_year = BTreeMap::new();
        let mut covariates_by_year = BTreeMap::new();
        let income_base = rng_area.random_range(9_000.0..18_000.0);
        let gini_base = rng_area.random_range(25.0..40.0);
        let pct65_base = rng_area.random_range(10.0..30.0);
        for (k, &year) in years.iter().enumerate() {
            population_by_year.insert(year, population);
            covariates_by_year.insert(
                year,
                AnnualCovariates {
                    income_eur: income_base * (1.0 + 0.01 * k as f64),
                    gini_pct: (gini_base + normal(&mut rng_area, 0.3)).clamp(20.0, 45.0),
                    pct_65_plus: (pct65_base + normal(&mut rng_area, 0.3)).clamp(5.0, 40.0),
                },
            );
        }
        areas.push(AreaUnit {
            area_id: format!("A{:03}", i + 1),
            centroid,
            population_by_year,
            covariates_by_year,
        });
    }

    // Per-area habitat offsets.
    let temp_offsets: Vec<f64> = areas
        .iter()
        .map(|a| AREA_TEMP_GRADIENT_PER_KM * a.centroid.0 + normal(&mut rng_area, AREA_TEMP_SD))
        .collect();
    let rh_offsets: Vec<f64> = (0..config.n_areas)
        .map(|_| normal(&mut rng_area, RH_AREA_SD))
        .collect();
    let pm10_offsets: Vec<f64> = (0..config.n_areas)
        .map(|_| normal(&mut rng_area, PM10_AREA_SD))
        .collect();
    let no2_offsets: Vec<f64> = (0..config.n_areas)
        .map(|_| normal(&mut rng_area, NO2_AREA_SD))
        .collect();
    let o3_offsets: Vec<f64> = (0..config.n_areas)
        .map(|_| normal(&mut rng_area, O3_AREA_SD))
        .collect();

    // Daily exposures: one shared synoptic anomaly per day drives the
    // regional processes; areas add offsets and day noise.
    let mut exposures = Vec::new();
    let mut synoptic_by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for &year in &years {
        let mut synoptic = Ar1::new(SYNOPTIC_PHI, SYNOPTIC_SD, &mut rng_weather);
        let mut pm10_ar = Ar1::new(PM10_PHI, PM10_AR_SD, &mut rng_weather);
        let mut no2_ar = Ar1::new(NO2_PHI, NO2_AR_SD, &mut rng_weather);
        let mut o3_ar = Ar1::new(O3_PHI, O3_AR_SD, &mut rng_weather);
        let mut episode = false;
        for date in generated_days(year, config.exposure_buffer_days) {
            let syn = synoptic.step(&mut rng_weather);
            synoptic_by_date.insert(date, syn);
            let pm10_reg = pm10_ar.step(&mut rng_weather);
            let no2_reg = no2_ar.step(&mut rng_weather);
            let o3_reg = o3_ar.step(&mut rng_weather);
            let stay = if episode {
                O3_EPISODE_STAY
            } else {
                O3_EPISODE_START
            };
            episode = rng_weather.random::<f64>() < stay;
            let o3_episode = if episode { O3_EPISODE_LIFT } else { 0.0 };
            let season = seasonal_mean(date);
            for (a, area) in areas.iter().enumerate() {
                let tmax =
                    season + temp_offsets[a] + syn + normal(&mut rng_weather, DAY_TEMP_SD);
                let rh = (RH_BASE_PCT + rh_offsets[a] + normal(&mut rng_weather, RH_DAY_SD))
                    .clamp(5.0, 100.0);
                let pm10 = (PM10_BASE + pm10_offsets[a] + pm10_reg
                    + normal(&mut rng_weather, PM10_DAY_SD))
                .max(0.5);
                let no2 = (NO2_BASE + no2_offsets[a] + no2_reg
                    + normal(&mut rng_weather, NO2_DAY_SD))
                .max(0.5);
                let o3 = (O3_BASE + o3_offsets[a] + o3_reg + o3_episode
                    + config.o3_heat_coupling * syn
                    + normal(&mut rng_weather, O3_DAY_SD))
                .max(0.5);
                exposures.push(DailyAreaExposure {
                    area_id: area.area_id.clone(),
                    date,
                    tmax_c: tmax,
                    rh_pct: rh,
                    pm10_ugm3: pm10,
                    no2_ugm3: no2,
                    o3_ugm3: o3,
                    tmax_sd: 0.6,
                    rh_sd: 3.0,
                    pm10_sd: 2.5,
                    no2_sd: 1.5,
                    o3_sd: 2.5,
                });
            }
        }
    }

    // Indicator inputs from the generated series, via the exposure module.
    let reference: Vec<i32> = {
        let r: Vec<i32> = years.iter().copied().filter(|&y| y != 2015).collect();
        if r.is_empty() {
            years.clone()
        } else {
            r
        }
    };
    let area_tmax: Vec<(String, NaiveDate, f64)> = exposures
        .iter()
        .map(|e| (e.area_id.clone(), e.date, e.tmax_c))
        .collect();
    let triggers = compute_trigger_table(&area_tmax, &reference, config.trigger_min_obs)?;
    let rh_values: Vec<(String, f64)> = exposures
        .iter()
        .map(|e| (e.area_id.clone(), e.rh_pct))
        .collect();
    let q4_thresholds = q4_humidity_thresholds(&rh_values);

    // Synthetic station network: shared synoptic plus station texture, with
    // per-station triggers and region-wide heatwave runs per season.
    let station_offsets: Vec<f64> = (0..config.n_stations)
        .map(|_| normal(&mut rng_station, STATION_OFFSET_SD))
        .collect();
    let mut station_tmax: Vec<(String, NaiveDate, f64)> = Vec::new();
    let mut station_by_date: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    for &year in &years {
        for date in generated_days(year, config.exposure_buffer_days) {
            let syn = synoptic_by_date[&date];
            let season = seasonal_mean(date);
            let mut row = Vec::with_capacity(config.n_stations);
            for (s, off) in station_offsets.iter().enumerate() {
                let t = season + off + syn + normal(&mut rng_station, STATION_DAY_SD);
                station_tmax.push((format!("S{s:03}"), date, t));
                row.push(t);
            }
            station_by_date.insert(date, row);
        }
    }
    let station_triggers =
        compute_trigger_table(&station_tmax, &reference, config.trigger_min_obs)?;
    let mut heatwave_flags = BTreeMap::new();
    for &year in &years {
        let days = generated_days(year, config.exposure_buffer_days);
        let flags_by_day: Vec<Vec<bool>> = days
            .iter()
            .map(|d| {
                let row = &station_by_date[d];
                (0..config.n_stations)
                    .map(|s| {
                        let trig = station_triggers
                            .get(&format!("S{s:03}"), chrono::Datelike::month(d))
                            .expect("station trigger cells cover generated months");
                        row[s] > trig
                    })
                    .collect()
            })
            .collect();
        let flags = heatwave_indicator(
            &flags_by_day,
            config.n_stations,
            DEFAULT_HEATWAVE_FRACTION,
            DEFAULT_HEATWAVE_MIN_RUN,
        )?;
        for (d, f) in days.iter().zip(flags) {
            heatwave_flags.insert(*d, f);
        }
    }
    let indicators = IndicatorInputs {
        triggers,
        q4_thresholds,
        heatwave_flags,
    };

    // First assembly pass: zero counts, real indicators, real drop rule.
    let settings = PanelSettings::for_years(years.clone());
    let zero_deaths: Vec<DeathCounts> = {
        let mut v = Vec::new();
        for area in &areas {
            for &year in &years {
                for date in crate::data::summer_days(year) {
                    v.push(DeathCounts {
                        area_id: area.area_id.clone(),
                        date,
                        deaths_all: 0,
                        deaths_65: 0,
                        deaths_85: 0,
                    });
                }
            }
        }
        v
    };
    let skeleton = assemble_panel(
        &areas,
        &zero_deaths,
        &exposures,
        &indicators,
        &config.spec,
        &settings,
    )?;
    let design = build_design(&skeleton, &config.spec)?;

    // Truth coefficients aligned to the design columns.
    let mut gamma = vec![0.0f64; design.names.len()];
    for (name, value) in &config.coefficients {
        match design.names.iter().position(|n| n == name) {
            Some(j) => gamma[j] = *value,
            None => {
                return Err(SimulateError::InvalidConfig(format!(
                    "unknown coefficient {name:?}; design columns are {:?}",
                    design.names
                )))
            }
        }
    }

    // Realized random effects in the latent layout (areas outermost).
    let n_years = skeleton.n_years();
    let n_months = skeleton.n_months();
    let has = |e| config.spec.has_effect(e);
    let area_iid: Vec<f64> = if has(RandomEffect::AreaIid) {
        let sd = 1.0 / config.tau_area_iid.sqrt();
        (0..config.n_areas)
            .map(|_| normal(&mut rng_effects, sd))
            .collect()
    } else {
        Vec::new()
    };
    let matern: Vec<f64> = if has(RandomEffect::AreaMatern) {
        if config.matern_sigma == 0.0 {
            vec![0.0; config.n_areas]
        } else {
            let params = MaternParams::new(
                config.matern_sigma,
                config.matern_range_km,
                config.spec.matern_smoothness,
            )?;
            let mut c = matern_covariance_matrix(&skeleton.centroids, &params);
            let nugget = 1e-10 * config.matern_sigma * config.matern_sigma;
            for i in 0..c.nrows() {
                c[(i, i)] += nugget;
            }
            let chol = c
                .cholesky()
                .ok_or_else(|| SimulateError::InvalidConfig(
                    "Matérn covariance is not positive definite".into(),
                ))?;
            let z = nalgebra::DVector::from_fn(config.n_areas, |_, _| normal(&mut rng_effects, 1.0));
            (chol.l() * z).iter().copied().collect()
        }
    } else {
        Vec::new()
    };
    let year_rw1: Vec<f64> = if has(RandomEffect::YearRw1) {
        if n_years < 2 {
            return Err(SimulateError::InvalidConfig(
                "the year walk needs at least 2 years".into(),
            ));
        }
        let block = rw1_precision(n_years, 1)?;
        sample_constrained(
            &block.structure,
            config.tau_year_rw1,
            config.n_areas,
            &mut rng_effects,
        )
    } else {
        Vec::new()
    };
    let month_cyclic: Vec<f64> = if has(RandomEffect::MonthCyclicRw1) {
        let block = cyclic_rw1_precision(n_months, 1)?;
        sample_constrained(
            &block.structure,
            config.tau_month_cyclic,
            config.n_areas,
            &mut rng_effects,
        )
    } else {
        Vec::new()
    };

    // Linear predictors and counts, in panel-row order.
    let mut eta = Vec::with_capacity(skeleton.rows.len());
    let mut final_deaths: BTreeMap<(String, NaiveDate), u64> = BTreeMap::new();
    for (i, row) in skeleton.rows.iter().enumerate() {
        let mut v = design.offset[i];
        for &j in design.row_cols(i) {
            v += gamma[j as usize];
        }
        if !area_iid.is_empty() {
            v += area_iid[row.area_index];
        }
        if !matern.is_empty() {
            v += matern[row.area_index];
        }
        if !year_rw1.is_empty() {
            v += year_rw1[row.area_index * n_years + row.year_index];
        }
        if !month_cyclic.is_empty() {
            v += month_cyclic[row.area_index * n_months + row.month_index];
        }
        eta.push(v);
        let y = draw_count(&mut rng_counts, v.exp(), config.size, config.zero_weight);
        final_deaths.insert((row.area_id.clone(), row.date), y);
    }

    // Second assembly pass with the drawn counts. Cells the window rule
    // dropped keep zero counts so re-assembly at smaller lags stays possible.
    let deaths: Vec<DeathCounts> = zero_deaths
        .into_iter()
        .map(|mut d| {
            if let Some(&y) = final_deaths.get(&(d.area_id.clone(), d.date)) {
                d.deaths_all = y;
                d.deaths_65 = y;
                d.deaths_85 = y;
            }
            d
        })
        .collect();
    let panel = assemble_panel(
        &areas,
        &deaths,
        &exposures,
        &indicators,
        &config.spec,
        &settings,
    )?;
    debug_assert_eq!(panel.rows.len(), skeleton.rows.len());

    let coefficient_by_name: BTreeMap<String, f64> = design
        .names
        .iter()
        .cloned()
        .zip(gamma.iter().copied())
        .collect();
    let truth = SimulationTruth {
        seed,
        coefficient_names: design.names.clone(),
        coefficients: gamma,
        size: config.size,
        zero_weight: config.zero_weight,
        tau_area_iid: config.tau_area_iid,
        tau_year_rw1: config.tau_year_rw1,
        tau_month_cyclic: config.tau_month_cyclic,
        matern_sigma: config.matern_sigma,
        matern_range_km: config.matern_range_km,
        area_iid,
        year_rw1,
        month_cyclic,
        matern,
        eta,
        coefficient_by_name,
    };
    Ok(SimulatedData {
        panel,
        truth,
        areas,
        deaths,
        exposures,
        indicators,
        settings,
    })
}

/// Moran-style spatial autocorrelation with inverse-distance weights:
/// near zero for spatially unstructured values, positive when neighbors
/// resemble each other.
pub fn moran_statistic(values: &[f64], points: &[(f64, f64)]) -> f64 {
    assert_eq!(values.len(), points.len());
    let n = values.len();
    assert!(n >= 3, "Moran statistic needs at least 3 points");
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let mut num = 0.0;
    let mut wsum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = points[i].0 - points[j].0;
            let dy = points[i].1 - points[j].1;
            let w = 1.0 / dx.hypot(dy).max(1e-6);
            num += w * dev[i] * dev[j];
            wsum += w;
        }
    }
    (n as f64 / wsum) * (num / denom)
}

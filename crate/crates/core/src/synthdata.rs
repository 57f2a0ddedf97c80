// SPDX-License-Identifier: Apache-2.0

//! Reproducible synthetic farms, NWP series and power observations.
//!
//! Wind at hub height comes from an AR(1) process on a latent standard
//! normal, pushed through the Weibull quantile function so that the marginal
//! is Weibull while consecutive hours stay correlated. Each NWP model sees
//! the same latent truth plus its own constant ws100 bias and white noise.
//! All generators are pure functions of their arguments.

use chrono::{DateTime, Datelike, Duration, TimeZone, Timelike, Utc};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::baseline::{physical_power, RHO0};
use crate::data::{hourly_grid, FarmConfig, NwpFeatureVector, Terrain, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::util::{self, fnv1a};

/// NWP model id that denotes the noise-free weather truth.
pub const TRUTH_MODEL_ID: &str = "truth";

/// Latent wind AR(1) coefficient (hourly).
pub const WIND_AR: f64 = 0.95;
/// Magnitude of the per-model constant ws100 bias, m/s.
pub const NWP_BIAS: f64 = 0.5;
/// Standard deviation of the per-model ws100 white noise, m/s.
pub const NWP_NOISE: f64 = 0.4;
/// Multiplicative power noise standard deviation per unit of turbulence.
pub const POWER_NOISE_PER_TURBULENCE: f64 = 0.05;
/// Power noise draws are truncated to this many standard deviations.
pub const POWER_NOISE_CLIP: f64 = 3.0;
/// Forecast issue hour (UTC) of the previous day for day-ahead runs.
pub const ISSUE_HOUR: i64 = 6;

/// Per-terrain generator ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainRange {
    pub terrain: Terrain,
    /// Weibull scale of ws100, m/s.
    pub weibull_scale: f64,
    pub weibull_shape: f64,
    /// Uniform range of `turbulence_scale`.
    pub turbulence: (f64, f64),
    /// Power-law shear exponent between 10 m and 100 m.
    pub shear: f64,
    /// Mean surface pressure, hPa.
    pub pressure: f64,
    /// Mean temperature, K.
    pub temperature: f64,
    /// Center of the farm locations (lat, lon).
    pub location: (f64, f64),
}

/// Terrain range table used by [`generate_farm_config`] and
/// [`generate_nwp_series`].
pub const TERRAIN_RANGES: [TerrainRange; 5] = [
    TerrainRange {
        terrain: Terrain::Onshore,
        weibull_scale: 8.5,
        weibull_shape: 2.0,
        turbulence: (1.0, 1.8),
        shear: 0.16,
        pressure: 1010.0,
        temperature: 283.0,
        location: (52.5, 9.5),
    },
    TerrainRange {
        terrain: Terrain::Offshore,
        weibull_scale: 11.0,
        weibull_shape: 2.2,
        turbulence: (0.5, 1.0),
        shear: 0.11,
        pressure: 1013.0,
        temperature: 284.0,
        location: (54.5, 6.5),
    },
    TerrainRange {
        terrain: Terrain::Forest,
        weibull_scale: 6.0,
        weibull_shape: 2.0,
        turbulence: (2.4, 3.2),
        shear: 0.30,
        pressure: 990.0,
        temperature: 281.0,
        location: (50.5, 9.0),
    },
    TerrainRange {
        terrain: Terrain::Farmland,
        weibull_scale: 8.0,
        weibull_shape: 2.0,
        turbulence: (1.0, 1.6),
        shear: 0.18,
        pressure: 1008.0,
        temperature: 283.5,
        location: (52.0, 11.5),
    },
    TerrainRange {
        terrain: Terrain::Mountain,
        weibull_scale: 9.0,
        weibull_shape: 1.9,
        turbulence: (1.6, 2.4),
        shear: 0.22,
        pressure: 930.0,
        temperature: 279.0,
        location: (48.0, 11.0),
    },
];

pub fn terrain_range(terrain: Terrain) -> &'static TerrainRange {
    TERRAIN_RANGES
        .iter()
        .find(|r| r.terrain == terrain)
        .expect("every terrain has a range entry")
}

/// Start of generated series when no explicit start is given.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()
}

/// Draw a farm description for `terrain`, deterministic in `(seed, terrain)`.
pub fn generate_farm_config(seed: u64, terrain: Terrain) -> FarmConfig {
    let range = terrain_range(terrain);
    let mut rng = util::rng(seed, 0x100 + terrain as u64);
    let radius: f64 = rng.gen_range(40.0..60.0);
    let turbines: f64 = f64::from(rng.gen_range(5u32..30));
    let v_cut_in = rng.gen_range(2.8..3.5);
    let v_rated = rng.gen_range(11.5..13.0);
    let v_cut_out = rng.gen_range(24.0..26.0);
    let turbulence_scale = rng.gen_range(range.turbulence.0..range.turbulence.1);
    let lat = range.location.0 + rng.gen_range(-1.0..1.0);
    let lon = range.location.1 + rng.gen_range(-1.0..1.0);
    FarmConfig {
        farm_id: format!("{}-{seed}", terrain.as_str()),
        terrain,
        rotor_area: turbines * std::f64::consts::PI * radius * radius,
        rated_power: turbines * 3000.0,
        v_cut_in,
        v_rated,
        v_cut_out,
        location: (lat, lon),
        turbulence_scale,
    }
}

/// Per-farm Weibull scale: the terrain scale perturbed by at most ±8 %,
/// derived from the farm location so that a config always maps to one climate.
fn farm_weibull_scale(config: &FarmConfig) -> f64 {
    let range = terrain_range(config.terrain);
    let h = fnv1a(&format!("{:.6}/{:.6}", config.location.0, config.location.1));
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    range.weibull_scale * (0.92 + 0.16 * u)
}

/// Constant ws100 bias of an NWP model.
pub fn nwp_bias(nwp_model_id: &str) -> f64 {
    if nwp_model_id == TRUTH_MODEL_ID {
        0.0
    } else if fnv1a(nwp_model_id) & 1 == 0 {
        NWP_BIAS
    } else {
        -NWP_BIAS
    }
}

/// Weibull quantile of the standard-normal latent `z`.
fn weibull_from_latent(z: f64, scale: f64, shape: f64) -> f64 {
    // 1 - Φ(z) = erfc(z / √2) / 2, computed directly to keep the upper tail.
    let survival = (0.5 * erfc(z / std::f64::consts::SQRT_2)).max(1e-300);
    scale * (-survival.ln()).powf(1.0 / shape)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

/// Lead time of a day-ahead forecast for `t`, issued at [`ISSUE_HOUR`] on
/// the previous day.
pub fn day_ahead_lead_time(t: DateTime<Utc>) -> f64 {
    (24 - ISSUE_HOUR + i64::from(t.hour())) as f64
}

/// Noise-free weather at the farm.
fn weather_truth(config: &FarmConfig, start: DateTime<Utc>, n: usize, seed: u64) -> Vec<NwpFeatureVector> {
    let range = terrain_range(config.terrain);
    let scale = farm_weibull_scale(config);
    let mut rng = util::rng(seed, 0x200);
    let innov = (1.0 - WIND_AR * WIND_AR).sqrt();
    let mut z: f64 = rng.sample(StandardNormal);
    let mut pressure_latent: f64 = rng.sample(StandardNormal);
    let mut temp_latent: f64 = rng.sample(StandardNormal);
    let mut hum_latent: f64 = rng.sample(StandardNormal);
    let prevailing = 240f64.to_radians();
    let mut dir = prevailing + 0.5 * rng.sample::<f64, _>(StandardNormal);
    let shear_factor = 0.1f64.powf(range.shear);
    let mut out = Vec::with_capacity(n);
    for t in hourly_grid(start, n) {
        z = WIND_AR * z + innov * rng.sample::<f64, _>(StandardNormal);
        pressure_latent = 0.98 * pressure_latent + (1.0 - 0.98f64 * 0.98).sqrt() * rng.sample::<f64, _>(StandardNormal);
        temp_latent = 0.9 * temp_latent + (1.0 - 0.81f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
        hum_latent = 0.9 * hum_latent + (1.0 - 0.81f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
        dir = wrap_angle(dir + 0.03 * wrap_angle(prevailing - dir) + 0.12 * rng.sample::<f64, _>(StandardNormal));

        let ws100 = weibull_from_latent(z, scale, range.weibull_shape);
        let ws10 = ws100 * shear_factor;
        let day = f64::from(t.ordinal0());
        let hour = f64::from(t.hour());
        let seasonal = (2.0 * std::f64::consts::PI * (day - 110.0) / 365.0).sin();
        let diurnal = (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin();
        out.push(NwpFeatureVector {
            ws100,
            ws10,
            wdir_sin: dir.sin(),
            wdir_cos: dir.cos(),
            pressure: range.pressure + 10.0 * pressure_latent,
            temperature: range.temperature + 8.0 * seasonal + 4.0 * diurnal + 2.0 * temp_latent,
            humidity: (0.75 - 0.08 * diurnal + 0.1 * hum_latent).clamp(0.0, 1.0),
        });
    }
    out
}

/// Hourly NWP series starting at [`default_start`].
pub fn generate_nwp_series(
    config: &FarmConfig,
    n_steps: usize,
    nwp_model_id: &str,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    generate_nwp_series_from(config, default_start(), n_steps, nwp_model_id, seed)
}

/// Hourly NWP series for `nwp_model_id` starting at `start`.
///
/// The weather truth depends on `(config, start, seed)` only; the model id
/// selects the bias and noise stream layered on top of it. Passing
/// [`TRUTH_MODEL_ID`] returns the truth itself.
pub fn generate_nwp_series_from(
    config: &FarmConfig,
    start: DateTime<Utc>,
    n_steps: usize,
    nwp_model_id: &str,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if n_steps == 0 {
        return Err(Error::EmptyRequest("n_steps must be at least 1".into()));
    }
    config.validate()?;
    let truth = weather_truth(config, start, n_steps, seed);
    let timestamps = hourly_grid(start, n_steps);
    let features = if nwp_model_id == TRUTH_MODEL_ID {
        truth
    } else {
        let bias = nwp_bias(nwp_model_id);
        let shear_factor = 0.1f64.powf(terrain_range(config.terrain).shear);
        let mut rng = util::rng(seed, 0x300 ^ fnv1a(nwp_model_id));
        truth
            .into_iter()
            .map(|f| {
                let mut g = || rng.sample::<f64, _>(StandardNormal);
                let ws100 = (f.ws100 + bias + NWP_NOISE * g()).max(0.0);
                let ws10 = (ws100 * shear_factor + 0.2 * g()).max(0.0);
                let dir = f.wdir_sin.atan2(f.wdir_cos) + 0.1 * g();
                NwpFeatureVector {
                    ws100,
                    ws10,
                    wdir_sin: dir.sin(),
                    wdir_cos: dir.cos(),
                    pressure: f.pressure + 1.0 * g(),
                    temperature: f.temperature + 0.5 * g(),
                    humidity: (f.humidity + 0.03 * g()).clamp(0.0, 1.0),
                }
            })
            .collect()
    };
    let lead_time = timestamps.iter().map(|t| day_ahead_lead_time(*t)).collect();
    Ok(TimeSeriesDataset {
        farm_id: config.farm_id.clone(),
        nwp_model_id: nwp_model_id.to_string(),
        timestamps,
        features,
        power: None,
        lead_time,
    })
}

/// Operational changes during a farm's lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// Power forced to zero every day for clock hours in `[from_hour, to_hour)`
    /// (wrapping past midnight when `from_hour > to_hour`).
    NightShutoff { from_hour: u32, to_hour: u32 },
    Maintenance,
    NwpModelChange { nwp_model_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    #[serde(flatten)]
    pub kind: EventKind,
    pub start: DateTime<Utc>,
    #[serde(default)]
    pub end: Option<DateTime<Utc>>,
}

impl LifecycleEvent {
    pub fn validate(&self) -> Result<()> {
        if let Some(end) = self.end {
            if end <= self.start {
                return Err(Error::validation("end", "must be after start"));
            }
        }
        match &self.kind {
            EventKind::NightShutoff { from_hour, to_hour } => {
                if *from_hour >= 24 || *to_hour >= 24 {
                    return Err(Error::validation("from_hour/to_hour", "clock hours must lie in [0, 24)"));
                }
                if from_hour == to_hour {
                    return Err(Error::validation("from_hour/to_hour", "empty clock interval"));
                }
            }
            EventKind::Maintenance => {
                if self.end.is_none() {
                    return Err(Error::validation("end", "maintenance requires an end"));
                }
            }
            EventKind::NwpModelChange { nwp_model_id } => {
                if nwp_model_id.is_empty() {
                    return Err(Error::validation("nwp_model_id", "must not be empty"));
                }
            }
        }
        Ok(())
    }

    pub fn is_active(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && self.end.map_or(true, |e| t < e)
    }

    /// True when the event forces power to zero at `t`.
    pub fn forces_zero(&self, t: DateTime<Utc>) -> bool {
        if !self.is_active(t) {
            return false;
        }
        match &self.kind {
            EventKind::NightShutoff { from_hour, to_hour } => clock_in_interval(t.hour(), *from_hour, *to_hour),
            EventKind::Maintenance => true,
            EventKind::NwpModelChange { .. } => false,
        }
    }

    fn overlaps(&self, other: &LifecycleEvent) -> bool {
        let a_end = self.end;
        let b_end = other.end;
        a_end.map_or(true, |e| other.start < e) && b_end.map_or(true, |e| self.start < e)
    }
}

/// Whether clock hour `h` lies in `[from, to)`, wrapping past midnight.
pub fn clock_in_interval(h: u32, from: u32, to: u32) -> bool {
    if from < to {
        (from..to).contains(&h)
    } else {
        h >= from || h < to
    }
}

/// Check each event and reject contradictory combinations: overlapping night
/// shut-offs with different clock intervals, or NWP changes at the same
/// instant naming different models.
pub fn validate_events(events: &[LifecycleEvent]) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        e.validate().map_err(|err| match err {
            Error::Validation { path, message } => Error::validation(format!("events[{i}].{path}"), message),
            other => other,
        })?;
    }
    for (i, a) in events.iter().enumerate() {
        for (j, b) in events.iter().enumerate().skip(i + 1) {
            let contradictory = match (&a.kind, &b.kind) {
                (EventKind::NightShutoff { .. }, EventKind::NightShutoff { .. }) => a.overlaps(b) && a.kind != b.kind,
                (EventKind::NwpModelChange { .. }, EventKind::NwpModelChange { .. }) => {
                    a.start == b.start && a.kind != b.kind
                }
                _ => false,
            };
            if contradictory {
                return Err(Error::validation(
                    format!("events[{j}]"),
                    format!("contradicts events[{i}]"),
                ));
            }
        }
    }
    Ok(())
}

/// Observed normalized power for the weather truth `nwp_truth`.
///
/// Power is the physical curve of the truth features times a truncated
/// lognormal factor with σ = 0.05·turbulence_scale, clipped to [0, 1], and
/// exactly zero whenever an event forces a shut-down.
pub fn generate_power_series(
    config: &FarmConfig,
    nwp_truth: &TimeSeriesDataset,
    events: &[LifecycleEvent],
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if nwp_truth.is_labeled() {
        return Err(Error::validation("nwp_truth.power", "truth series must be unlabeled"));
    }
    config.validate()?;
    validate_events(events)?;
    let sigma = POWER_NOISE_PER_TURBULENCE * config.turbulence_scale;
    let mut rng = util::rng(seed, 0x400);
    let mut power = Vec::with_capacity(nwp_truth.len());
    for (t, f) in nwp_truth.timestamps.iter().zip(&nwp_truth.features) {
        let noise: f64 = rng.sample(StandardNormal);
        let base = physical_power(f.ws100, f.air_density(), config)?;
        let p = if events.iter().any(|e| e.forces_zero(*t)) {
            0.0
        } else if sigma == 0.0 {
            base
        } else {
            let z = noise.clamp(-POWER_NOISE_CLIP, POWER_NOISE_CLIP);
            (base * (sigma * z - 0.5 * sigma * sigma).exp()).clamp(0.0, 1.0)
        };
        power.push(Some(p));
    }
    Ok(TimeSeriesDataset {
        power: Some(power),
        ..nwp_truth.clone()
    })
}

/// Air density that makes [`physical_power`] hit its reference point, used
/// when constructing rated-point fixtures.
pub fn reference_conditions() -> (f64, f64) {
    // pressure (hPa), temperature (K) with ρ = ρ0
    let temperature = 288.15;
    (RHO0 * crate::data::R_DRY_AIR * temperature / 100.0, temperature)
}

/// Shift every timestamp of `ds` by `hours`.
pub fn shift_time(ds: &TimeSeriesDataset, hours: i64) -> TimeSeriesDataset {
    let mut out = ds.clone();
    for t in &mut out.timestamps {
        *t += Duration::hours(hours);
    }
    out
}

// SPDX-License-Identifier: Apache-2.0

//! Farm descriptions, NWP feature records and the hourly dataset container,
//! including CSV persistence.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Duration, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gas constant of dry air, J/(kg·K).
pub const R_DRY_AIR: f64 = 287.05;

/// Number of NWP features per record.
pub const NWP_DIM: usize = 7;

/// Number of model inputs per record: NWP features plus the clock encoding.
pub const INPUT_DIM: usize = NWP_DIM + 2;

pub const FEATURE_NAMES: [&str; NWP_DIM] = [
    "ws100",
    "ws10",
    "wdir_sin",
    "wdir_cos",
    "pressure",
    "temperature",
    "humidity",
];

pub const INPUT_NAMES: [&str; INPUT_DIM] = [
    "ws100",
    "ws10",
    "wdir_sin",
    "wdir_cos",
    "pressure",
    "temperature",
    "humidity",
    "hour_sin",
    "hour_cos",
];

pub const CSV_HEADER: [&str; 10] = [
    "timestamp",
    "ws100",
    "ws10",
    "wdir_sin",
    "wdir_cos",
    "pressure",
    "temperature",
    "humidity",
    "lead_time",
    "power",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Terrain {
    Onshore,
    Offshore,
    Forest,
    Farmland,
    Mountain,
}

impl Terrain {
    pub const ALL: [Terrain; 5] = [
        Terrain::Onshore,
        Terrain::Offshore,
        Terrain::Forest,
        Terrain::Farmland,
        Terrain::Mountain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Terrain::Onshore => "onshore",
            Terrain::Offshore => "offshore",
            Terrain::Forest => "forest",
            Terrain::Farmland => "farmland",
            Terrain::Mountain => "mountain",
        }
    }
}

impl fmt::Display for Terrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Terrain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Terrain::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("terrain", format!("unknown terrain `{s}`")))
    }
}

/// Static description of a wind farm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmConfig {
    pub farm_id: String,
    pub terrain: Terrain,
    /// Total rotor area, m².
    pub rotor_area: f64,
    /// Installed capacity, kW.
    pub rated_power: f64,
    pub v_cut_in: f64,
    pub v_rated: f64,
    pub v_cut_out: f64,
    /// (latitude, longitude) in degrees.
    pub location: (f64, f64),
    pub turbulence_scale: f64,
}

impl FarmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.v_cut_in && self.v_cut_in < self.v_rated && self.v_rated < self.v_cut_out) {
            return Err(Error::validation(
                "v_cut_in/v_rated/v_cut_out",
                "expected 0 < v_cut_in < v_rated < v_cut_out",
            ));
        }
        if !(self.rotor_area > 0.0) {
            return Err(Error::validation("rotor_area", "must be positive"));
        }
        if !(self.rated_power > 0.0) {
            return Err(Error::validation("rated_power", "must be positive"));
        }
        if !(self.turbulence_scale >= 0.0) {
            return Err(Error::validation("turbulence_scale", "must be non-negative"));
        }
        Ok(())
    }
}

/// One hour of NWP output at a farm location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NwpFeatureVector {
    /// Wind speed at 100 m, m/s.
    pub ws100: f64,
    /// Wind speed at 10 m, m/s.
    pub ws10: f64,
    pub wdir_sin: f64,
    pub wdir_cos: f64,
    /// hPa.
    pub pressure: f64,
    /// K.
    pub temperature: f64,
    /// Relative humidity in [0, 1].
    pub humidity: f64,
}

impl NwpFeatureVector {
    pub fn to_array(&self) -> [f64; NWP_DIM] {
        [
            self.ws100,
            self.ws10,
            self.wdir_sin,
            self.wdir_cos,
            self.pressure,
            self.temperature,
            self.humidity,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NWP_DIM {
            return Err(Error::validation(
                "features",
                format!("expected {NWP_DIM} values, got {}", v.len()),
            ));
        }
        Ok(Self {
            ws100: v[0],
            ws10: v[1],
            wdir_sin: v[2],
            wdir_cos: v[3],
            pressure: v[4],
            temperature: v[5],
            humidity: v[6],
        })
    }

    /// Air density from the ideal-gas relation, kg/m³.
    pub fn air_density(&self) -> f64 {
        self.pressure * 100.0 / (R_DRY_AIR * self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ws100 >= 0.0 && self.ws10 >= 0.0) {
            return Err(Error::validation("ws100/ws10", "wind speeds must be non-negative"));
        }
        let norm = self.wdir_sin * self.wdir_sin + self.wdir_cos * self.wdir_cos;
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::validation("wdir_sin/wdir_cos", "direction must lie on the unit circle"));
        }
        if !(0.0..=1.0).contains(&self.humidity) {
            return Err(Error::validation("humidity", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Model input vector: the NWP features followed by a sin/cos encoding of
    /// the UTC hour of `timestamp`.
    pub fn model_input(&self, timestamp: DateTime<Utc>) -> Vec<f64> {
        let mut v = Vec::with_capacity(INPUT_DIM);
        v.extend_from_slice(&self.to_array());
        let angle = 2.0 * std::f64::consts::PI * f64::from(timestamp.hour()) / 24.0;
        v.push(angle.sin());
        v.push(angle.cos());
        v
    }
}

/// Aligned NWP features, timestamps and optional normalized power for one
/// farm and one NWP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub farm_id: String,
    pub nwp_model_id: String,
    pub timestamps: Vec<DateTime<Utc>>,
    pub features: Vec<NwpFeatureVector>,
    /// `None` when the dataset is unlabeled; individual entries may be missing.
    pub power: Option<Vec<Option<f64>>>,
    /// Forecast horizon in hours for each record.
    pub lead_time: Vec<f64>,
}

impl TimeSeriesDataset {
    pub fn empty(farm_id: impl Into<String>, nwp_model_id: impl Into<String>) -> Self {
        Self {
            farm_id: farm_id.into(),
            nwp_model_id: nwp_model_id.into(),
            timestamps: Vec::new(),
            features: Vec::new(),
            power: None,
            lead_time: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.power.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        if self.features.len() != n || self.lead_time.len() != n {
            return Err(Error::validation(
                "features",
                "timestamps, features and lead_time must have equal length",
            ));
        }
        if let Some(p) = &self.power {
            if p.len() != n {
                return Err(Error::validation("power", "power length differs from timestamps"));
            }
            for (i, v) in p.iter().enumerate() {
                if let Some(v) = v {
                    if !(0.0..=1.0).contains(v) {
                        return Err(Error::validation(format!("power[{i}]"), "must lie in [0, 1]"));
                    }
                }
            }
        }
        for w in self.timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation("timestamps", "must be strictly increasing"));
            }
        }
        for (i, f) in self.features.iter().enumerate() {
            f.validate().map_err(|e| match e {
                Error::Validation { path, message } => {
                    Error::validation(format!("features[{i}].{path}"), message)
                }
                other => other,
            })?;
        }
        for lt in &self.lead_time {
            if !(*lt >= 0.0) {
                return Err(Error::validation("lead_time", "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn power_at(&self, i: usize) -> Option<f64> {
        self.power.as_ref().and_then(|p| p[i])
    }

    /// Indices of records carrying a power label.
    pub fn labeled_indices(&self) -> Vec<usize> {
        match &self.power {
            None => Vec::new(),
            Some(p) => (0..p.len()).filter(|&i| p[i].is_some()).collect(),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled_indices().len()
    }

    pub fn model_input(&self, i: usize) -> Vec<f64> {
        self.features[i].model_input(self.timestamps[i])
    }

    pub fn model_inputs(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.model_input(i)).collect()
    }

    /// `(model inputs, labels)` over labeled records.
    pub fn labeled_xy(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let idx = self.labeled_indices();
        let x = idx.iter().map(|&i| self.model_input(i)).collect();
        let y = idx.iter().map(|&i| self.power_at(i).unwrap_or_default()).collect();
        (x, y)
    }

    pub fn ws100(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.ws100).collect()
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.timestamps.last().copied()
    }

    /// Records selected by `keep`, preserving order.
    pub fn filter_indices(&self, keep: &[usize]) -> Self {
        Self {
            farm_id: self.farm_id.clone(),
            nwp_model_id: self.nwp_model_id.clone(),
            timestamps: keep.iter().map(|&i| self.timestamps[i]).collect(),
            features: keep.iter().map(|&i| self.features[i]).collect(),
            power: self.power.as_ref().map(|p| keep.iter().map(|&i| p[i]).collect()),
            lead_time: keep.iter().map(|&i| self.lead_time[i]).collect(),
        }
    }

    /// Records with `from <= t < to`.
    pub fn slice_time(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Self {
        let lo = self.timestamps.partition_point(|t| *t < from);
        let hi = self.timestamps.partition_point(|t| *t < to);
        self.filter_indices(&(lo..hi).collect::<Vec<_>>())
    }

    /// Only the labeled records.
    pub fn labeled_only(&self) -> Self {
        self.filter_indices(&self.labeled_indices())
    }

    pub fn without_power(&self) -> Self {
        Self {
            power: None,
            ..self.clone()
        }
    }

    /// Copy of `self` labeled with `source`'s power, matched by timestamp.
    /// Timestamps absent from `source` stay unlabeled.
    pub fn with_power_from(&self, source: &TimeSeriesDataset) -> Self {
        let power = self
            .timestamps
            .iter()
            .map(|t| {
                source
                    .timestamps
                    .binary_search(t)
                    .ok()
                    .and_then(|j| source.power_at(j))
            })
            .collect();
        Self {
            power: Some(power),
            ..self.clone()
        }
    }

    /// Chronological concatenation; `other` must start after `self` ends.
    pub fn concat(&self, other: &TimeSeriesDataset) -> Result<Self> {
        if let (Some(a), Some(b)) = (self.last_timestamp(), other.timestamps.first()) {
            if *b <= a {
                return Err(Error::validation("timestamps", "concatenated datasets overlap"));
            }
        }
        let power = match (&self.power, &other.power) {
            (None, None) => None,
            (a, b) => {
                let mut p: Vec<Option<f64>> = a.clone().unwrap_or_else(|| vec![None; self.len()]);
                p.extend(b.clone().unwrap_or_else(|| vec![None; other.len()]));
                Some(p)
            }
        };
        let mut out = self.clone();
        out.timestamps.extend_from_slice(&other.timestamps);
        out.features.extend_from_slice(&other.features);
        out.lead_time.extend_from_slice(&other.lead_time);
        out.power = power;
        Ok(out)
    }

    /// Write in the hourly CSV schema. `confidence`, when given, adds a
    /// trailing `confidence` column.
    pub fn write_csv<W: Write>(&self, writer: W, confidence: Option<&[f64]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = CSV_HEADER.to_vec();
        if confidence.is_some() {
            header.push("confidence");
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let f = &self.features[i];
            let mut rec = vec![
                self.timestamps[i].to_rfc3339_opts(SecondsFormat::Secs, true),
                f.ws100.to_string(),
                f.ws10.to_string(),
                f.wdir_sin.to_string(),
                f.wdir_cos.to_string(),
                f.pressure.to_string(),
                f.temperature.to_string(),
                f.humidity.to_string(),
                self.lead_time[i].to_string(),
                self.power_at(i).map(|p| p.to_string()).unwrap_or_default(),
            ];
            if let Some(c) = confidence {
                rec.push(c[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read the hourly CSV schema. A dataset whose power column is entirely
    /// empty is returned unlabeled.
    pub fn read_csv<R: Read>(reader: R, farm_id: &str, nwp_model_id: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.len() < CSV_HEADER.len()
            || headers.iter().zip(CSV_HEADER).any(|(a, b)| a != b)
        {
            return Err(Error::validation("header", "unexpected CSV header"));
        }
        let mut ds = TimeSeriesDataset::empty(farm_id, nwp_model_id);
        let mut power = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |col: usize| -> Result<f64> {
                rec[col].parse::<f64>().map_err(|e| {
                    Error::validation(format!("row {row}, column {}", CSV_HEADER[col]), e.to_string())
                })
            };
            let ts = DateTime::parse_from_rfc3339(&rec[0])
                .map_err(|e| Error::validation(format!("row {row}, column timestamp"), e.to_string()))?
                .with_timezone(&Utc);
            ds.timestamps.push(ts);
            ds.features.push(NwpFeatureVector {
                ws100: num(1)?,
                ws10: num(2)?,
                wdir_sin: num(3)?,
                wdir_cos: num(4)?,
                pressure: num(5)?,
                temperature: num(6)?,
                humidity: num(7)?,
            });
            ds.lead_time.push(num(8)?);
            power.push(if rec[9].is_empty() { None } else { Some(num(9)?) });
        }
        if power.iter().any(Option::is_some) {
            ds.power = Some(power);
        }
        ds.validate()?;
        Ok(ds)
    }
}

/// Hourly grid of `n` instants starting at `start`.
pub fn hourly_grid(start: DateTime<Utc>, n: usize) -> Vec<DateTime<Utc>> {
    (0..n).map(|i| start + Duration::hours(i as i64)).collect()
}

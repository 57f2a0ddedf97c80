// SPDX-License-Identifier: Apache-2.0

//! Physical power-curve model: the no-training fallback and the skill-score
//! reference.

use serde::{Deserialize, Serialize};

use crate::data::{FarmConfig, TimeSeriesDataset};
use crate::error::{Error, Result};

/// Reference air density, kg/m³.
pub const RHO0: f64 = 1.225;

/// Normalized power for wind speed `v` (m/s) at air density `rho` (kg/m³).
///
/// Zero below cut-in and from cut-out upwards; otherwise the cubic
/// `(ρ/ρ0)·(v/v_rated)³` capped at 1.
pub fn physical_power(v: f64, rho: f64, config: &FarmConfig) -> Result<f64> {
    physical_power_with_reference(v, rho, RHO0, config)
}

fn physical_power_with_reference(v: f64, rho: f64, rho0: f64, config: &FarmConfig) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::Domain(format!("air density must be positive, got {rho}")));
    }
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("wind speed must be non-negative, got {v}")));
    }
    if v < config.v_cut_in || v >= config.v_cut_out {
        return Ok(0.0);
    }
    let ratio = v / config.v_rated;
    Ok(((rho / rho0) * ratio * ratio * ratio).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalModel {
    pub config: FarmConfig,
    pub rho0: f64,
}

impl PhysicalModel {
    pub fn new(config: FarmConfig) -> Self {
        Self { config, rho0: RHO0 }
    }

    pub fn with_reference_density(config: FarmConfig, rho0: f64) -> Result<Self> {
        if !(rho0 > 0.0) {
            return Err(Error::validation("rho0", "must be positive"));
        }
        Ok(Self { config, rho0 })
    }

    pub fn predict(&self, features: &crate::data::NwpFeatureVector) -> Result<f64> {
        physical_power_with_reference(features.ws100, features.air_density(), self.rho0, &self.config)
    }
}

/// Elementwise physical power over `dataset`, using ws100 and the density
/// derived from pressure and temperature.
pub fn forecast_physical(model: &PhysicalModel, dataset: &TimeSeriesDataset) -> Result<Vec<f64>> {
    dataset.features.iter().map(|f| model.predict(f)).collect()
}

// SPDX-License-Identifier: Apache-2.0

//! Coopetitive soft-gating ensemble.
//!
//! Members are weighted by three error tables: global RMSE over a sliding
//! window of observations, mean absolute error among the nearest stored
//! weather situations, and RMSE per lead-time bucket. The three gated weight
//! vectors are multiplied elementwise and renormalized.

use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::baseline::PhysicalModel;
use crate::data::{NwpFeatureVector, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::nnet::{DenseNetwork, Standardizer};
use crate::transfer::mtl::MtlNetwork;
use crate::transfer::UniversalModel;

pub const DEFAULT_ETA: f64 = 2.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Observations kept for error statistics (90 days of hourly records).
pub const DEFAULT_WINDOW: usize = 2160;
pub const DEFAULT_NEIGHBORS: usize = 50;
/// Lower edges of the lead-time buckets in hours; the last is open.
pub const HORIZON_EDGES: [f64; 5] = [0.0, 6.0, 12.0, 24.0, 48.0];

/// Soft-gating weights `w_j ∝ ((Σ e + ε) / (e_j + ε))^η`.
///
/// Errors must be non-negative and `epsilon` positive. Computed in log space
/// so large exponents do not overflow.
pub fn soft_gate(errors: &[f64], eta: f64, epsilon: f64) -> Vec<f64> {
    if errors.is_empty() {
        return Vec::new();
    }
    let total: f64 = errors.iter().sum::<f64>() + epsilon;
    let logs: Vec<f64> = errors.iter().map(|e| eta * (total.ln() - (e + epsilon).ln())).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / sum).collect()
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Index of the lead-time bucket containing `horizon`.
pub fn horizon_bucket(horizon: f64) -> usize {
    HORIZON_EDGES.iter().rposition(|e| horizon >= *e).unwrap_or(0)
}

/// Anything that produces a normalized power forecast for one record.
pub trait Predictor: Send + Sync {
    fn predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Result<f64>;
}

impl Predictor for DenseNetwork {
    fn predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Result<f64> {
        Ok(self.forward(&features.model_input(timestamp))?[0])
    }
}

impl Predictor for PhysicalModel {
    fn predict(&self, features: &NwpFeatureVector, _timestamp: DateTime<Utc>) -> Result<f64> {
        PhysicalModel::predict(self, features)
    }
}

impl Predictor for UniversalModel {
    fn predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Result<f64> {
        Ok(self.predict_inputs(&[features.model_input(timestamp)])?[0])
    }
}

/// One task head of an MTL network.
#[derive(Debug, Clone)]
pub struct MtlHead {
    pub network: Arc<MtlNetwork>,
    pub farm_id: String,
}

impl Predictor for MtlHead {
    fn predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Result<f64> {
        Ok(self.network.predict(&self.farm_id, &[features.model_input(timestamp)])?[0])
    }
}

/// Wraps a closure as a member.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&NwpFeatureVector, DateTime<Utc>) -> Result<f64> + Send + Sync,
{
    fn predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Result<f64> {
        (self.0)(features, timestamp)
    }
}

#[derive(Clone)]
pub struct Member {
    pub id: String,
    pub predictor: Arc<dyn Predictor>,
}

impl Member {
    pub fn new(id: impl Into<String>, predictor: impl Predictor + 'static) -> Self {
        Self {
            id: id.into(),
            predictor: Arc::new(predictor),
        }
    }

    /// Forecast clipped to `[0, 1]`, or `None` when the member fails.
    fn try_predict(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>) -> Option<f64> {
        match self.predictor.predict(features, timestamp) {
            Ok(p) if p.is_finite() => Some(p),
            Ok(_) => None,
            Err(e) => {
                log::debug!("member `{}` failed at {timestamp}: {e}", self.id);
                None
            }
        }
    }
}

impl fmt::Debug for Member {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Member").field("id", &self.id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsgeParams {
    pub eta: f64,
    pub epsilon: f64,
    pub window: usize,
    pub neighbors: usize,
}

impl Default for CsgeParams {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            epsilon: DEFAULT_EPSILON,
            window: DEFAULT_WINDOW,
            neighbors: DEFAULT_NEIGHBORS,
        }
    }
}

impl CsgeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("eta", "must be finite and non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("epsilon", "must be positive"));
        }
        if self.window == 0 {
            return Err(Error::validation("window", "must be at least 1"));
        }
        if self.neighbors == 0 {
            return Err(Error::validation("neighbors", "must be at least 1"));
        }
        Ok(())
    }
}

/// One labeled record with every member's forecast for it. `None` marks a
/// member that failed or had no forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: DateTime<Utc>,
    pub features: NwpFeatureVector,
    pub lead_time: f64,
    pub observed: f64,
    pub predictions: Vec<Option<f64>>,
}

/// Forecast with full attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsgePrediction {
    pub timestamp: DateTime<Utc>,
    /// Fused forecast clipped to `[0, 1]`.
    pub fused: f64,
    /// Weighted sum before clipping.
    pub raw: f64,
    pub member_ids: Vec<String>,
    pub predictions: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub global_weights: Vec<f64>,
    pub local_weights: Vec<f64>,
    pub leadtime_weights: Vec<f64>,
}

/// Serializable error tables and situation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsgeState {
    pub member_ids: Vec<String>,
    pub params: CsgeParams,
    pub global_errors: Vec<f64>,
    /// Members whose errors were replaced by the failure penalty.
    pub flagged: Vec<bool>,
    /// `[bucket][member]` RMSE; `None` for buckets without observations.
    pub leadtime_errors: Vec<Option<Vec<f64>>>,
    pub index: Vec<Observation>,
}

#[derive(Debug, Clone)]
pub struct CsgeEnsemble {
    members: Vec<Member>,
    params: CsgeParams,
    history: Vec<Observation>,
    global_errors: Vec<f64>,
    flagged: Vec<bool>,
    leadtime_errors: Vec<Option<Vec<f64>>>,
    scaler: Option<Standardizer>,
    /// Standardized inputs of `history`, row-major.
    keys: Vec<f64>,
}

/// Per-member aggregate of absolute errors over `rows`. Members without any
/// usable record get twice the worst other error and a flag.
fn aggregate(history: &[Observation], rows: impl Iterator<Item = usize> + Clone, n: usize, rmse: bool) -> (Vec<f64>, Vec<bool>) {
    let mut errors = vec![0.0; n];
    let mut flagged = vec![false; n];
    for (j, (err, flag)) in errors.iter_mut().zip(flagged.iter_mut()).enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        let mut failed = false;
        for r in rows.clone() {
            match history[r].predictions[j] {
                Some(p) => {
                    let d = (p - history[r].observed).abs();
                    acc += if rmse { d * d } else { d };
                    count += 1;
                }
                None => failed = true,
            }
        }
        if count == 0 {
            *flag = true;
            *err = f64::NAN;
        } else {
            *flag = failed;
            *err = if rmse { (acc / count as f64).sqrt() } else { acc / count as f64 };
        }
    }
    let worst = errors.iter().copied().filter(|e| e.is_finite()).fold(0.0, f64::max);
    let penalty = if worst > 0.0 { 2.0 * worst } else { 1.0 };
    for e in errors.iter_mut() {
        if !e.is_finite() {
            *e = penalty;
        }
    }
    (errors, flagged)
}

impl CsgeEnsemble {
    pub fn new(members: Vec<Member>, params: CsgeParams) -> Result<Self> {
        params.validate()?;
        if members.is_empty() {
            return Err(Error::EmptyRequest("ensemble needs at least one member".into()));
        }
        let mut ids: Vec<&str> = members.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("members", "member ids must be unique"));
        }
        let n = members.len();
        Ok(Self {
            members,
            params,
            history: Vec::new(),
            global_errors: vec![0.0; n],
            flagged: vec![false; n],
            leadtime_errors: vec![None; HORIZON_EDGES.len()],
            scaler: None,
            keys: Vec::new(),
        })
    }

    /// Rebuild from exported state and the matching members.
    pub fn from_state(state: CsgeState, members: Vec<Member>) -> Result<Self> {
        let ids: Vec<&String> = members.iter().map(|m| &m.id).collect();
        if ids != state.member_ids.iter().collect::<Vec<_>>() {
            return Err(Error::validation("member_ids", "members do not match the stored state"));
        }
        let mut ens = Self::new(members, state.params)?;
        ens.observe(state.index)?;
        ens.global_errors = state.global_errors;
        ens.flagged = state.flagged;
        ens.leadtime_errors = state.leadtime_errors;
        Ok(ens)
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }

    pub fn params(&self) -> &CsgeParams {
        &self.params
    }

    pub fn global_errors(&self) -> &[f64] {
        &self.global_errors
    }

    pub fn flagged(&self) -> &[bool] {
        &self.flagged
    }

    pub fn history(&self) -> &[Observation] {
        &self.history
    }

    /// Evaluate every member on the labeled records of `data`.
    pub fn observations(&self, data: &TimeSeriesDataset) -> Vec<Observation> {
        data.labeled_indices()
            .into_iter()
            .map(|i| Observation {
                timestamp: data.timestamps[i],
                features: data.features[i],
                lead_time: data.lead_time[i],
                observed: data.power_at(i).unwrap_or_default(),
                predictions: self
                    .members
                    .iter()
                    .map(|m| m.try_predict(&data.features[i], data.timestamps[i]))
                    .collect(),
            })
            .collect()
    }

    /// Global RMSE per member over `reference`; history is left alone.
    pub fn fit_global(&mut self, reference: &TimeSeriesDataset) -> Result<()> {
        let obs = self.observations(reference);
        if obs.is_empty() {
            return Err(Error::EmptyRequest("reference has no labeled records".into()));
        }
        let (errors, flagged) = aggregate(&obs, 0..obs.len(), self.members.len(), true);
        self.global_errors = errors;
        self.flagged = flagged;
        Ok(())
    }

    /// Replace the history with `reference` and recompute every table.
    pub fn fit(&mut self, reference: &TimeSeriesDataset) -> Result<()> {
        let obs = self.observations(reference);
        if obs.is_empty() {
            return Err(Error::EmptyRequest("reference has no labeled records".into()));
        }
        self.history.clear();
        self.observe(obs)
    }

    /// Append labeled records scored by the current members, keep the most
    /// recent `window` of them and recompute every table.
    pub fn update(&mut self, new_observations: &TimeSeriesDataset) -> Result<()> {
        let obs = self.observations(new_observations);
        if obs.is_empty() {
            return Err(Error::EmptyRequest("update has no labeled records".into()));
        }
        self.observe(obs)
    }

    /// As [`update`](Self::update) with forecasts already attached, e.g.
    /// logged before the members were retrained.
    pub fn observe(&mut self, observations: Vec<Observation>) -> Result<()> {
        let n = self.members.len();
        for (k, o) in observations.iter().enumerate() {
            if o.predictions.len() != n {
                return Err(Error::validation(
                    format!("observations[{k}].predictions"),
                    format!("expected {n} entries"),
                ));
            }
            if !o.observed.is_finite() || !(o.lead_time >= 0.0) {
                return Err(Error::validation(format!("observations[{k}]"), "non-finite label or lead time"));
            }
        }
        self.history.extend(observations);
        if self.history.len() > self.params.window {
            let drop = self.history.len() - self.params.window;
            self.history.drain(..drop);
        }
        self.recompute();
        Ok(())
    }

    fn recompute(&mut self) {
        let n = self.members.len();
        if self.history.is_empty() {
            self.global_errors = vec![0.0; n];
            self.flagged = vec![false; n];
            self.leadtime_errors = vec![None; HORIZON_EDGES.len()];
            self.scaler = None;
            self.keys.clear();
            return;
        }
        let h = &self.history;
        let (errors, flagged) = aggregate(h, 0..h.len(), n, true);
        self.global_errors = errors;
        self.flagged = flagged;
        self.leadtime_errors = (0..HORIZON_EDGES.len())
            .map(|b| {
                let rows: Vec<usize> = (0..h.len()).filter(|&r| horizon_bucket(h[r].lead_time) == b).collect();
                (!rows.is_empty()).then(|| aggregate(h, rows.iter().copied(), n, true).0)
            })
            .collect();
        let inputs: Vec<Vec<f64>> = h.iter().map(|o| o.features.model_input(o.timestamp)).collect();
        let scaler = Standardizer::fit(&inputs).unwrap_or_else(|_| Standardizer::identity(inputs[0].len()));
        self.keys = inputs.iter().flat_map(|x| scaler.standardize(x)).collect();
        self.scaler = Some(scaler);
    }

    pub fn global_weights(&self) -> Vec<f64> {
        soft_gate(&self.global_errors, self.params.eta, self.params.epsilon)
    }

    /// Rows of the `k` stored situations nearest to the query, ties broken by
    /// position.
    pub fn neighbors(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>, k: usize) -> Vec<usize> {
        let Some(scaler) = &self.scaler else {
            return Vec::new();
        };
        let q = scaler.standardize(&features.model_input(timestamp));
        let d = q.len();
        let mut dist: Vec<(f64, usize)> = self
            .keys
            .chunks(d)
            .enumerate()
            .map(|(r, key)| (key.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), r))
            .collect();
        let k = k.min(dist.len());
        if k == 0 {
            return Vec::new();
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
            dist.truncate(k);
        }
        dist.sort_unstable_by(cmp);
        dist.into_iter().map(|(_, r)| r).collect()
    }

    /// Gated mean absolute error over the `k` nearest stored situations.
    /// Uniform when the index is empty.
    pub fn local_weights(&self, features: &NwpFeatureVector, timestamp: DateTime<Utc>, k: usize) -> Vec<f64> {
        let n = self.members.len();
        let rows = self.neighbors(features, timestamp, k.max(1));
        if rows.is_empty() {
            log::warn!("local index is empty; using uniform local weights");
            return uniform(n);
        }
        let (errors, _) = aggregate(&self.history, rows.into_iter(), n, false);
        soft_gate(&errors, self.params.eta, self.params.epsilon)
    }

    /// Gated RMSE of the bucket containing `horizon`; uniform for a bucket
    /// without observations.
    pub fn leadtime_weights(&self, horizon: f64) -> Vec<f64> {
        match &self.leadtime_errors[horizon_bucket(horizon.max(0.0))] {
            Some(errors) => soft_gate(errors, self.params.eta, self.params.epsilon),
            None => uniform(self.members.len()),
        }
    }

    pub fn leadtime_errors(&self) -> &[Option<Vec<f64>>] {
        &self.leadtime_errors
    }

    /// Fused forecast for one record. Members that fail get weight zero; if
    /// all fail the call errors.
    pub fn predict(
        &self,
        features: &NwpFeatureVector,
        timestamp: DateTime<Utc>,
        horizon: f64,
        k: usize,
    ) -> Result<CsgePrediction> {
        let predictions: Vec<Option<f64>> = self.members.iter().map(|m| m.try_predict(features, timestamp)).collect();
        if predictions.iter().all(Option::is_none) {
            return Err(Error::Runtime(format!("every ensemble member failed at {timestamp}")));
        }
        let global = self.global_weights();
        let local = self.local_weights(features, timestamp, k);
        let lead = self.leadtime_weights(horizon);
        let mut weights: Vec<f64> = (0..self.members.len())
            .map(|j| if predictions[j].is_some() { global[j] * local[j] * lead[j] } else { 0.0 })
            .collect();
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            weights.iter_mut().for_each(|w| *w /= sum);
        } else {
            // every product underflowed: fall back to the available members
            let alive = predictions.iter().filter(|p| p.is_some()).count() as f64;
            for (w, p) in weights.iter_mut().zip(&predictions) {
                *w = if p.is_some() { 1.0 / alive } else { 0.0 };
            }
        }
        let raw: f64 = weights
            .iter()
            .zip(&predictions)
            .map(|(w, p)| w * p.unwrap_or(0.0))
            .sum();
        Ok(CsgePrediction {
            timestamp,
            fused: raw.clamp(0.0, 1.0),
            raw,
            member_ids: self.member_ids(),
            predictions,
            weights,
            global_weights: global,
            local_weights: local,
            leadtime_weights: lead,
        })
    }

    /// Fused forecasts for every record of `data`.
    pub fn predict_dataset(&self, data: &TimeSeriesDataset, k: usize) -> Result<Vec<CsgePrediction>> {
        (0..data.len())
            .map(|i| self.predict(&data.features[i], data.timestamps[i], data.lead_time[i], k))
            .collect()
    }

    pub fn state(&self) -> CsgeState {
        CsgeState {
            member_ids: self.member_ids(),
            params: self.params,
            global_errors: self.global_errors.clone(),
            flagged: self.flagged.clone(),
            leadtime_errors: self.leadtime_errors.clone(),
            index: self.history.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.state())?)
    }
}

/// Attribution records as JSON lines.
pub fn attribution_json_lines(predictions: &[CsgePrediction]) -> Result<String> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

// SPDX-License-Identifier: Apache-2.0

//! Growing-data phase: novelty detection on the residual stream, retrieval
//! of similar situations from the pool, guarded adaptation, and the
//! month-by-month lifecycle runner.

mod runner;

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::nnet::{self, DenseNetwork, Samples, Standardizer, TrainConfig};
use crate::util;

pub use runner::{
    run_lifecycle, AdaptationRecord, AuditEntry, LifecycleReport, MethodMetric, MonthSummary, METRICS_HEADER,
};

/// Hours of the most recent labeled data used as the adaptation guard slice.
pub const GUARD_HOURS: usize = 168;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NoData,
    LittleData,
    Growing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub labeled_hours: usize,
    pub active_model_ids: Vec<String>,
}

impl PhaseState {
    pub fn for_hours(labeled_hours: usize, little_data: usize, growing: usize) -> Phase {
        if labeled_hours >= growing {
            Phase::Growing
        } else if labeled_hours >= little_data {
            Phase::LittleData
        } else {
            Phase::NoData
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyKind {
    RegimeShift,
    RepeatedZeroInterval,
    NwpChangeDeclared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    Residual {
        window_rmse: f64,
        /// Mean squared residual of the reference period.
        reference_mean: f64,
        reference_std: f64,
        z: f64,
    },
    /// Zero power in `[from_hour, to_hour)` every day since `since`.
    ClockInterval {
        from_hour: u32,
        to_hour: u32,
        since: DateTime<Utc>,
    },
    NwpModel {
        nwp_model_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyEvent {
    pub kind: NoveltyKind,
    pub detected_at: DateTime<Utc>,
    pub evidence: Evidence,
}

/// One forecast with its observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamPoint {
    pub timestamp: DateTime<Utc>,
    pub prediction: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoveltyParams {
    /// Rolling window of squared residuals.
    pub window: usize,
    /// Trailing reference period preceding the window.
    pub reference: usize,
    pub z_threshold: f64,
    /// Consecutive steps above the threshold before a regime shift fires.
    pub persistence: usize,
    /// Days a zero interval must repeat on while power is expected.
    pub zero_days: usize,
    /// Consecutive days searched for those repeats.
    pub zero_lookback_days: usize,
    /// A forecast above this counts as expecting power.
    pub prediction_floor: f64,
}

impl Default for NoveltyParams {
    fn default() -> Self {
        Self {
            window: 168,
            reference: 720,
            z_threshold: 3.0,
            persistence: 24,
            zero_days: 5,
            zero_lookback_days: 7,
            prediction_floor: 0.1,
        }
    }
}

impl NoveltyParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.reference < 2 {
            return Err(Error::validation("window/reference", "need at least two points each"));
        }
        if self.persistence == 0 || self.zero_days == 0 {
            return Err(Error::validation("persistence/zero_days", "must be at least 1"));
        }
        if self.zero_lookback_days < self.zero_days {
            return Err(Error::validation("zero_lookback_days", "must be at least zero_days"));
        }
        if !self.z_threshold.is_finite() || !self.prediction_floor.is_finite() {
            return Err(Error::validation("z_threshold/prediction_floor", "must be finite"));
        }
        Ok(())
    }
}

/// Scan `stream` (time-ordered) for regime shifts and repeated zero
/// intervals. Each ongoing episode yields one event.
pub fn detect_novelty(stream: &[StreamPoint], params: &NoveltyParams) -> Result<Vec<NoveltyEvent>> {
    params.validate()?;
    if stream.is_empty() {
        return Err(Error::EmptyRequest("residual stream is empty".into()));
    }
    if stream.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
        return Err(Error::validation("stream", "timestamps must be strictly increasing"));
    }
    let mut events = regime_shifts(stream, params);
    events.extend(zero_intervals(stream, params));
    events.sort_by_key(|e| e.detected_at);
    Ok(events)
}

fn regime_shifts(stream: &[StreamPoint], p: &NoveltyParams) -> Vec<NoveltyEvent> {
    let (w, r) = (p.window, p.reference);
    let sq: Vec<f64> = stream
        .iter()
        .map(|s| {
            let e = s.prediction - s.observed;
            e * e
        })
        .collect();
    let mut s1 = vec![0.0; sq.len() + 1];
    let mut s2 = vec![0.0; sq.len() + 1];
    for (i, v) in sq.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let scale = (1.0 / w as f64 + 1.0 / r as f64).sqrt();
    let mut events = Vec::new();
    let mut run = 0usize;
    for t in (w + r - 1)..sq.len() {
        let (ws, we) = (t + 1 - w, t + 1);
        let (rs, re) = (ws - r, ws);
        let m_w = (s1[we] - s1[ws]) / w as f64;
        let mu = (s1[re] - s1[rs]) / r as f64;
        let var = ((s2[re] - s2[rs]) / r as f64 - mu * mu).max(0.0);
        let sigma = var.sqrt().max(1e-12);
        let z = (m_w - mu) / (sigma * scale);
        if z > p.z_threshold {
            run += 1;
            if run == p.persistence {
                events.push(NoveltyEvent {
                    kind: NoveltyKind::RegimeShift,
                    detected_at: stream[t].timestamp,
                    evidence: Evidence::Residual {
                        window_rmse: m_w.sqrt(),
                        reference_mean: mu,
                        reference_std: var.sqrt(),
                        z,
                    },
                });
            }
        } else {
            run = 0;
        }
    }
    events
}

/// Largest circular run of `true` in `hours`; `None` when empty or full.
fn largest_circular_run(hours: &[bool; 24]) -> Option<(u32, u32)> {
    if hours.iter().all(|h| *h) || !hours.iter().any(|h| *h) {
        return None;
    }
    // start scanning right after a false hour so runs do not wrap mid-scan
    let first_false = hours.iter().position(|h| !*h).unwrap();
    let mut best: Option<(usize, usize)> = None;
    let mut k = 0;
    while k < 24 {
        let h = (first_false + 1 + k) % 24;
        if hours[h] {
            let mut len = 0;
            while len < 24 && hours[(h + len) % 24] {
                len += 1;
            }
            if best.map_or(true, |(_, l)| len > l) {
                best = Some((h, len));
            }
            k += len;
        } else {
            k += 1;
        }
    }
    best.map(|(s, l)| (s as u32, ((s + l) % 24) as u32))
}

fn zero_intervals(stream: &[StreamPoint], p: &NoveltyParams) -> Vec<NoveltyEvent> {
    let mut days: BTreeMap<NaiveDate, [Option<(f64, f64)>; 24]> = BTreeMap::new();
    let mut day_end: BTreeMap<NaiveDate, DateTime<Utc>> = BTreeMap::new();
    for s in stream {
        let d = s.timestamp.date_naive();
        days.entry(d).or_insert([None; 24])[s.timestamp.hour() as usize] = Some((s.prediction, s.observed));
        day_end.insert(d, s.timestamp);
    }
    let dates: Vec<NaiveDate> = days.keys().copied().collect();
    let usable = |d: &NaiveDate| days[d].iter().all(Option::is_some);
    let mut events = Vec::new();
    let mut active: Option<[bool; 24]> = None;
    for end in 0..dates.len() {
        // shortest lookback ending today that holds the interval on enough days
        let mut detected = None;
        for len in p.zero_days..=p.zero_lookback_days {
            if len > end + 1 {
                break;
            }
            let span = &dates[end + 1 - len..=end];
            let consecutive = span.windows(2).all(|w| w[1].signed_duration_since(w[0]).num_days() == 1);
            if !consecutive || !span.iter().all(usable) {
                break;
            }
            let mut zero = [true; 24];
            for d in span {
                for (h, slot) in days[d].iter().enumerate() {
                    if slot.unwrap().1 != 0.0 {
                        zero[h] = false;
                    }
                }
            }
            let Some((from, to)) = largest_circular_run(&zero) else { continue };
            let expected = span
                .iter()
                .filter(|d| run_hours(from, to).any(|h| days[d][h as usize].unwrap().0 > p.prediction_floor))
                .count();
            if expected >= p.zero_days {
                detected = Some((from, to, span[0]));
                break;
            }
        }
        match detected {
            Some((from, to, first)) => {
                let mut mask = [false; 24];
                run_hours(from, to).for_each(|h| mask[h as usize] = true);
                let continuing = active.is_some_and(|a| a.iter().zip(&mask).any(|(x, y)| *x && *y));
                if !continuing {
                    events.push(NoveltyEvent {
                        kind: NoveltyKind::RepeatedZeroInterval,
                        detected_at: day_end[&dates[end]],
                        evidence: Evidence::ClockInterval {
                            from_hour: from,
                            to_hour: to,
                            since: first.and_hms_opt(0, 0, 0).unwrap().and_utc(),
                        },
                    });
                }
                active = Some(mask);
            }
            None => active = None,
        }
    }
    events
}

/// Clock hours of the circular interval `[from, to)`.
pub fn run_hours(from: u32, to: u32) -> impl Iterator<Item = u32> + Clone {
    let len = (to + 24 - from) % 24;
    let len = if len == 0 { 24 } else { len };
    (0..len).map(move |k| (from + k) % 24)
}

/// Pool records nearest to a novel segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    /// `(farm_id, timestamp, distance)` ordered by distance, then farm and
    /// time.
    pub records: Vec<(String, DateTime<Utc>, f64)>,
    /// Retrieved records grouped per pool dataset, in pool order.
    pub datasets: Vec<TimeSeriesDataset>,
}

impl RetrievedSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn joint_row(ds: &TimeSeriesDataset, i: usize) -> Vec<f64> {
    let mut v = ds.model_input(i);
    v.push(ds.power_at(i).unwrap_or_default());
    v
}

/// For every record of `novel_segment`, the `k` nearest labeled pool records
/// in the standardized joint space of model inputs and power. Each input is
/// weighted by its absolute correlation with power over the pool, scaled so
/// the input block carries the same weight as power. The union is
/// deduplicated; ties break by `(farm_id, timestamp)`.
pub fn retrieve_similar_situations(
    pool: &[TimeSeriesDataset],
    novel_segment: &TimeSeriesDataset,
    k: usize,
) -> Result<RetrievedSet> {
    if pool.is_empty() {
        return Err(Error::EmptyRequest("retrieval pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::validation("k", "must be at least 1"));
    }
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (p, ds) in pool.iter().enumerate() {
        for i in ds.labeled_indices() {
            keys.push((p, i));
            rows.push(joint_row(ds, i));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyRequest("retrieval pool has no labeled records".into()));
    }
    let scaler = Standardizer::fit(&rows)?;
    // inputs weighted by their correlation with power; the input block as a
    // whole weighs as much as power
    let d_in = rows[0].len() - 1;
    let power: Vec<f64> = rows.iter().map(|r| r[d_in]).collect();
    let mut weights: Vec<f64> = (0..d_in)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let c = util::pearson(&col, &power);
            if c.is_finite() { c.abs() } else { 0.0 }
        })
        .collect();
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        weights.iter_mut().for_each(|w| *w /= norm);
    } else {
        weights = vec![1.0 / (d_in as f64).sqrt(); d_in];
    }
    let embed = |r: &[f64]| -> Vec<f64> {
        let mut z = scaler.standardize(r);
        z[..d_in].iter_mut().zip(&weights).for_each(|(v, w)| *v *= w);
        z
    };
    let flat: Vec<f64> = rows.iter().flat_map(|r| embed(r)).collect();
    let d = rows[0].len();
    let order = |a: &(f64, usize), b: &(f64, usize)| {
        let (pa, ia) = keys[a.1];
        let (pb, ib) = keys[b.1];
        a.0.total_cmp(&b.0)
            .then_with(|| pool[pa].farm_id.cmp(&pool[pb].farm_id))
            .then_with(|| pool[pa].timestamps[ia].cmp(&pool[pb].timestamps[ib]))
            .then(a.1.cmp(&b.1))
    };
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for i in novel_segment.labeled_indices() {
        let q = embed(&joint_row(novel_segment, i));
        let mut dist: Vec<(f64, usize)> = flat
            .chunks(d)
            .enumerate()
            .map(|(r, key)| (key.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), r))
            .collect();
        let kk = k.min(dist.len());
        if kk < dist.len() {
            dist.select_nth_unstable_by(kk - 1, order);
            dist.truncate(kk);
        }
        for (dd, r) in dist {
            let e = best.entry(r).or_insert(dd);
            *e = e.min(dd);
        }
    }
    let mut picked: Vec<(f64, usize)> = best.into_iter().map(|(r, dd)| (dd, r)).collect();
    picked.sort_by(order);
    let records = picked
        .iter()
        .map(|&(dd, r)| {
            let (p, i) = keys[r];
            (pool[p].farm_id.clone(), pool[p].timestamps[i], dd)
        })
        .collect();
    let mut per_pool: Vec<Vec<usize>> = vec![Vec::new(); pool.len()];
    for &(_, r) in &picked {
        per_pool[keys[r].0].push(keys[r].1);
    }
    let datasets = per_pool
        .into_iter()
        .enumerate()
        .filter(|(_, idx)| !idx.is_empty())
        .map(|(p, mut idx)| {
            idx.sort_unstable();
            pool[p].filter_indices(&idx)
        })
        .collect();
    Ok(RetrievedSet { records, datasets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub model: DenseNetwork,
    /// Whether the finetuned model replaced the original.
    pub adapted: bool,
    /// Guard-slice RMSE of the model before adaptation.
    pub original_rmse: f64,
    /// Guard-slice RMSE of the returned model.
    pub final_rmse: f64,
    pub guard_records: usize,
    pub training_records: usize,
}

/// Finetune `active` on `retrieved` plus `recent_target` and keep whichever
/// of the finetuned and original models scores better on the guard slice,
/// the last [`GUARD_HOURS`] labeled target records. Without target records
/// the guard is the retrieved tail, held out of training. `freeze` pins layers
/// (the trunk of an MTL-shaped model); `None` trains every layer.
pub fn adapt_to_novelty(
    active: &DenseNetwork,
    event: &NoveltyEvent,
    retrieved: &RetrievedSet,
    recent_target: &TimeSeriesDataset,
    freeze: Option<&[bool]>,
    cfg: &TrainConfig,
) -> Result<Adaptation> {
    let (tx, ty) = recent_target.labeled_xy();
    let mut rx = Vec::new();
    let mut ry = Vec::new();
    for ds in &retrieved.datasets {
        let (x, y) = ds.labeled_xy();
        rx.extend(x);
        ry.extend(y);
    }
    if tx.is_empty() && rx.is_empty() {
        return Err(Error::EmptyRequest("nothing to adapt on".into()));
    }
    let (train_x, train_y, guard_x, guard_y);
    if !tx.is_empty() {
        let cut = tx.len().saturating_sub(GUARD_HOURS);
        guard_x = tx[cut..].to_vec();
        guard_y = ty[cut..].to_vec();
        train_x = [rx, tx].concat();
        train_y = [ry, ty].concat();
    } else {
        let (n_train, _) = nnet::split_sizes(rx.len(), 0.2);
        guard_x = rx[n_train..].to_vec();
        guard_y = ry[n_train..].to_vec();
        train_x = rx[..n_train].to_vec();
        train_y = ry[..n_train].to_vec();
    }
    log::info!(
        "adapting to {:?} detected at {} on {} records",
        event.kind,
        event.detected_at,
        train_x.len()
    );
    let wrap = |y: &[f64]| y.iter().map(|v| vec![*v]).collect::<Vec<_>>();
    let (train_yy, guard_yy) = (wrap(&train_y), wrap(&guard_y));
    let mut staged = active.clone();
    if let Some(mask) = freeze {
        staged.set_freeze_mask(mask)?;
    }
    let guard = (!guard_x.is_empty()).then(|| Samples::new(&guard_x, &guard_yy));
    let (mut tuned, _) = nnet::train_with_validation(&staged, Samples::new(&train_x, &train_yy), guard, cfg)?;
    tuned.freeze_mask = active.freeze_mask.clone();
    let score = |net: &DenseNetwork| -> Result<f64> {
        if guard_x.is_empty() {
            return Ok(0.0);
        }
        Ok(util::rmse(&net.predict_many(&guard_x)?, &guard_y))
    };
    let original_rmse = score(active)?;
    let tuned_rmse = score(&tuned)?;
    let adapted = tuned_rmse <= original_rmse;
    Ok(Adaptation {
        model: if adapted { tuned } else { active.clone() },
        adapted,
        original_rmse,
        final_rmse: tuned_rmse.min(original_rmse),
        guard_records: guard_x.len(),
        training_records: train_x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(hours: &[u32]) -> [bool; 24] {
        let mut m = [false; 24];
        hours.iter().for_each(|h| m[*h as usize] = true);
        m
    }

    #[test]
    fn circular_runs() {
        assert_eq!(largest_circular_run(&mask(&[22, 23, 0, 1, 2, 3, 4, 5])), Some((22, 6)));
        assert_eq!(largest_circular_run(&mask(&[3, 4, 10])), Some((3, 5)));
        assert_eq!(largest_circular_run(&[true; 24]), None);
        assert_eq!(largest_circular_run(&[false; 24]), None);
        assert_eq!(run_hours(22, 6).collect::<Vec<_>>(), vec![22, 23, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn phases_follow_thresholds() {
        assert_eq!(PhaseState::for_hours(0, 168, 2160), Phase::NoData);
        assert_eq!(PhaseState::for_hours(168, 168, 2160), Phase::LittleData);
        assert_eq!(PhaseState::for_hours(2160, 168, 2160), Phase::Growing);
    }
}

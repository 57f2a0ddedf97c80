// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use chrono::{DateTime, Duration, Utc};
use windtl::data::{FarmConfig, Terrain, TimeSeriesDataset};
use windtl::nnet::TrainConfig;
use chrono::Timelike;
use windtl::csge::{CsgeEnsemble, CsgeParams, Member};
use windtl::lifecycle::{
    adapt_to_novelty, detect_novelty, retrieve_similar_situations, Evidence, NoveltyKind, NoveltyParams, StreamPoint,
};
use windtl::transfer::{train_regressor, ModelDims};
use windtl::synthdata::{
    clock_in_interval, default_start, generate_farm_config, generate_nwp_series_from, generate_power_series, EventKind, LifecycleEvent,
    TRUTH_MODEL_ID,
};

/// NWP series of `nwp` labeled with power generated from the truth, for
/// `hours` starting `offset` hours after the default start.
pub fn labeled_series(cfg: &FarmConfig, offset: i64, hours: usize, nwp: &str, seed: u64) -> TimeSeriesDataset {
    let start = default_start() + Duration::hours(offset);
    let truth = generate_nwp_series_from(cfg, start, hours, TRUTH_MODEL_ID, seed).unwrap();
    let power = generate_power_series(cfg, &truth, &[], seed).unwrap();
    generate_nwp_series_from(cfg, start, hours, nwp, seed)
        .unwrap()
        .with_power_from(&power)
}

pub fn labeled_farm(seed: u64, terrain: Terrain, hours: usize) -> (FarmConfig, TimeSeriesDataset) {
    let cfg = generate_farm_config(seed, terrain);
    let ds = labeled_series(&cfg, 0, hours, "nwpA", seed);
    (cfg, ds)
}

pub fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        batch_size: 32,
        learning_rate: 0.02,
        early_stop_patience: 8,
        ..TrainConfig::default()
    }
}

/// As [`labeled_series`] with operational events applied to the power.
pub fn labeled_series_with(
    cfg: &FarmConfig,
    offset: i64,
    hours: usize,
    nwp: &str,
    seed: u64,
    events: &[LifecycleEvent],
) -> TimeSeriesDataset {
    let start = default_start() + Duration::hours(offset);
    let truth = generate_nwp_series_from(cfg, start, hours, TRUTH_MODEL_ID, seed).unwrap();
    let power = generate_power_series(cfg, &truth, events, seed).unwrap();
    generate_nwp_series_from(cfg, start, hours, nwp, seed)
        .unwrap()
        .with_power_from(&power)
}

pub fn night_shutoff(from: DateTime<Utc>) -> LifecycleEvent {
    LifecycleEvent {
        kind: EventKind::NightShutoff { from_hour: 22, to_hour: 6 },
        start: from,
        end: None,
    }
}

/// Hours of labeled data before the growing phase opens.
pub const GROWING_HOURS: usize = 2160;

/// A target that enters the growing phase after 90 days and starts a nightly
/// 22:00-06:00 shut-off on day 30 of that phase, followed by 60 more days.
pub struct ShutoffFixture {
    pub target: TimeSeriesDataset,
    /// Index of the first shut-off hour.
    pub onset: usize,
    /// Pool farm that runs the same shut-off throughout.
    pub shutoff_farm: TimeSeriesDataset,
    /// Another onshore farm without any shut-off.
    pub normal_farm: TimeSeriesDataset,
}

pub fn shutoff_fixture(seed: u64) -> ShutoffFixture {
    let onset = GROWING_HOURS + 30 * 24;
    let hours = onset + 60 * 24;
    let target_cfg = generate_farm_config(seed, Terrain::Onshore);
    let event = night_shutoff(default_start() + Duration::hours(onset as i64));
    let target = labeled_series_with(&target_cfg, 0, hours, "nwpA", seed, &[event]);
    let a = generate_farm_config(seed + 101, Terrain::Onshore);
    let b = generate_farm_config(seed + 202, Terrain::Onshore);
    let always = night_shutoff(default_start() - Duration::days(1));
    ShutoffFixture {
        target,
        onset,
        shutoff_farm: labeled_series_with(&a, 0, GROWING_HOURS, "nwpA", seed + 101, &[always]),
        normal_farm: labeled_series(&b, 0, GROWING_HOURS, "nwpA", seed + 202),
    }
}

pub fn range(ds: &TimeSeriesDataset, from: usize, to: usize) -> TimeSeriesDataset {
    ds.filter_indices(&(from..to).collect::<Vec<_>>())
}

/// Finetune settings for the shut-off episode.
pub fn adapt_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        early_stop_patience: 15,
        ..quick_cfg()
    }
}

/// What happened in one shut-off episode run by [`shutoff_episode`].
#[derive(Debug)]
pub struct ShutoffOutcome {
    pub zero_events: usize,
    /// Detection time minus onset, when a zero-interval event fired.
    pub delay: Option<Duration>,
    pub interval: Option<(u32, u32)>,
    pub since_after_onset: bool,
    /// Share of retrieved records from the shut-off farm.
    pub share: f64,
    /// Shut-off-hour RMSE on a 30-day holdout, before and after adaptation.
    pub before_rmse: f64,
    pub after_rmse: f64,
    pub guard_ok: bool,
    /// CSGE global weights of the naive and the adapted member.
    pub weights: [f64; 2],
}

/// Train on the target before onset, watch the first week of the shut-off,
/// retrieve similar pool situations, adapt and score on the next 30 days.
pub fn shutoff_episode(seed: u64) -> ShutoffOutcome {
    let fx = shutoff_fixture(seed);
    let active = train_regressor(&range(&fx.target, 0, fx.onset), &ModelDims::default(), &quick_cfg()).unwrap();
    let pred = active.predict_dataset(&fx.target).unwrap();
    let scan_end = fx.onset + 7 * 24;
    let stream: Vec<StreamPoint> = (0..scan_end)
        .map(|i| StreamPoint {
            timestamp: fx.target.timestamps[i],
            prediction: pred[i],
            observed: fx.target.power_at(i).unwrap(),
        })
        .collect();
    let events = detect_novelty(&stream, &NoveltyParams::default()).unwrap();
    let zero: Vec<_> = events
        .into_iter()
        .filter(|e| e.kind == NoveltyKind::RepeatedZeroInterval)
        .collect();
    let onset_t = fx.target.timestamps[fx.onset];
    let mut out = ShutoffOutcome {
        zero_events: zero.len(),
        delay: None,
        interval: None,
        since_after_onset: false,
        share: 0.0,
        before_rmse: f64::NAN,
        after_rmse: f64::NAN,
        guard_ok: false,
        weights: [f64::NAN; 2],
    };
    let Some(event) = zero.first().cloned() else { return out };
    let Evidence::ClockInterval { from_hour, to_hour, since } = event.evidence else {
        return out;
    };
    out.delay = Some(event.detected_at - onset_t);
    out.interval = Some((from_hour, to_hour));
    out.since_after_onset = since >= onset_t;

    // the novel segment: zeros in the flagged hours where power was expected
    let detected = fx.target.timestamps.partition_point(|t| *t <= event.detected_at);
    let since_idx = fx.target.timestamps.partition_point(|t| *t < since);
    let night: Vec<usize> = (since_idx..detected)
        .filter(|&i| clock_in_interval(fx.target.timestamps[i].hour(), from_hour, to_hour) && pred[i] > 0.1)
        .collect();
    let segment = fx.target.filter_indices(&night);
    let pool = [fx.shutoff_farm.clone(), fx.normal_farm.clone()];
    let retrieved = retrieve_similar_situations(&pool, &segment, 5).unwrap();
    let hits = retrieved
        .records
        .iter()
        .filter(|(farm, _, _)| *farm == fx.shutoff_farm.farm_id)
        .count();
    out.share = hits as f64 / retrieved.len() as f64;

    let recent = range(&fx.target, since_idx, detected);
    let adaptation = adapt_to_novelty(&active, &event, &retrieved, &recent, None, &adapt_cfg()).unwrap();
    out.guard_ok = adaptation.final_rmse <= adaptation.original_rmse;

    let hold: Vec<usize> = (detected..detected + 30 * 24)
        .filter(|&i| clock_in_interval(fx.target.timestamps[i].hour(), 22, 6))
        .collect();
    let hold = fx.target.filter_indices(&hold);
    let obs = hold.labeled_xy().1;
    out.before_rmse = windtl::util::rmse(&active.predict_dataset(&hold).unwrap(), &obs);
    out.after_rmse = windtl::util::rmse(&adaptation.model.predict_dataset(&hold).unwrap(), &obs);

    let mut ens = CsgeEnsemble::new(
        vec![Member::new("naive", active), Member::new("aware", adaptation.model)],
        CsgeParams::default(),
    )
    .unwrap();
    ens.fit(&range(&fx.target, fx.onset - 7 * 24, fx.onset)).unwrap();
    ens.update(&range(&fx.target, detected, detected + 14 * 24)).unwrap();
    let w = ens.global_weights();
    out.weights = [w[0], w[1]];
    out
}

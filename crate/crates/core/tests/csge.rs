// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Timelike, Utc};
use common::labeled_farm;
use windtl::csge::{soft_gate, CsgeEnsemble, CsgeParams, CsgeState, FnPredictor, Member};
use windtl::data::{Terrain, TimeSeriesDataset};
use windtl::error::Error;

fn constant(id: &str, value: f64) -> Member {
    Member::new(id, FnPredictor(move |_: &_, _| Ok(value)))
}

/// Member reproducing the labels of `data` plus `offset`.
fn oracle(id: &str, data: &TimeSeriesDataset, offset: f64) -> Member {
    let table: Arc<HashMap<DateTime<Utc>, f64>> = Arc::new(
        data.labeled_indices()
            .into_iter()
            .map(|i| (data.timestamps[i], data.power_at(i).unwrap()))
            .collect(),
    );
    Member::new(
        id,
        FnPredictor(move |_: &_, t: DateTime<Utc>| {
            table
                .get(&t)
                .map(|p| (p + offset).clamp(0.0, 1.0))
                .ok_or_else(|| Error::Runtime("unknown timestamp".into()))
        }),
    )
}

fn with_power(data: &TimeSeriesDataset, value: f64) -> TimeSeriesDataset {
    TimeSeriesDataset {
        power: Some(vec![Some(value); data.len()]),
        ..data.clone()
    }
}

fn params(eta: f64) -> CsgeParams {
    CsgeParams {
        eta,
        epsilon: 1e-12,
        ..CsgeParams::default()
    }
}

#[test]
fn perfect_member_gets_the_largest_global_weight() {
    let (_, ds) = labeled_farm(1, Terrain::Onshore, 200);
    let mut ens = CsgeEnsemble::new(vec![oracle("perfect", &ds, 0.0), oracle("off", &ds, 0.1), constant("flat", 0.4)], CsgeParams::default()).unwrap();
    ens.fit_global(&ds).unwrap();
    assert_eq!(ens.global_errors()[0], 0.0);
    let w = ens.global_weights();
    assert!(w[0] > w[1] && w[0] > w[2]);
}

#[test]
fn one_record_reference_by_hand() {
    let (_, ds) = labeled_farm(2, Terrain::Onshore, 1);
    let ds = with_power(&ds, 0.2);
    let mut ens = CsgeEnsemble::new(vec![constant("a", 0.2), constant("b", 0.4)], CsgeParams::default()).unwrap();
    ens.fit_global(&ds).unwrap();
    assert_eq!(ens.global_errors()[0], 0.0);
    assert!((ens.global_errors()[1] - 0.2).abs() < 1e-15);
}

#[test]
fn identical_members_tie() {
    let (_, ds) = labeled_farm(3, Terrain::Onshore, 100);
    let mut ens = CsgeEnsemble::new(vec![oracle("a", &ds, 0.05), oracle("b", &ds, 0.05)], CsgeParams::default()).unwrap();
    ens.fit(&ds).unwrap();
    assert_eq!(ens.global_errors()[0], ens.global_errors()[1]);
    assert!(CsgeEnsemble::new(vec![constant("a", 0.1), constant("a", 0.2)], CsgeParams::default()).is_err());
}

#[test]
fn failing_member_is_penalized_and_flagged() {
    let (_, ds) = labeled_farm(4, Terrain::Onshore, 50);
    let broken = Member::new("broken", FnPredictor(|_: &_, _| Err(Error::Runtime("boom".into()))));
    let mut ens = CsgeEnsemble::new(vec![constant("a", 0.1), constant("b", 0.5), broken], CsgeParams::default()).unwrap();
    ens.fit_global(&ds).unwrap();
    let e = ens.global_errors();
    assert_eq!(e[2], 2.0 * e[0].max(e[1]));
    assert_eq!(ens.flagged(), &[false, false, true]);
    let p = ens.predict(&ds.features[0], ds.timestamps[0], 24.0, 10).unwrap();
    assert_eq!(p.weights[2], 0.0);
    let dead = CsgeEnsemble::new(
        vec![Member::new("x", FnPredictor(|_: &_, _| Err(Error::Runtime("boom".into()))))],
        CsgeParams::default(),
    )
    .unwrap();
    assert!(dead.predict(&ds.features[0], ds.timestamps[0], 24.0, 10).is_err());
}

#[test]
fn local_weights_follow_neighbor_errors() {
    let (_, ds) = labeled_farm(5, Terrain::Onshore, 300);
    let mut ens = CsgeEnsemble::new(vec![oracle("a", &ds, 0.0), oracle("b", &ds, 0.0)], params(1.0)).unwrap();
    ens.fit(&ds).unwrap();
    let w = ens.local_weights(&ds.features[0], ds.timestamps[0], 5);
    assert!((w[0] - 0.5).abs() < 1e-12);

    // neighbor MAEs 0.1 and 0.3 everywhere → 0.75 / 0.25
    let flat = with_power(&ds, 0.5);
    let mut ens = CsgeEnsemble::new(vec![constant("a", 0.4), constant("b", 0.8)], params(1.0)).unwrap();
    ens.fit(&flat).unwrap();
    let w = ens.local_weights(&ds.features[7], ds.timestamps[7], 50);
    assert!((w[0] - 0.75).abs() < 1e-9 && (w[1] - 0.25).abs() < 1e-9, "{w:?}");
    // saturated k uses the whole index
    let all = ens.local_weights(&ds.features[7], ds.timestamps[7], 10_000);
    assert_eq!(ens.neighbors(&ds.features[7], ds.timestamps[7], 10_000).len(), ds.len());
    assert!((all[0] - 0.75).abs() < 1e-9);
}

#[test]
fn perfect_neighbors_dominate_locally() {
    let (_, ds) = labeled_farm(6, Terrain::Onshore, 200);
    let mut ens = CsgeEnsemble::new(vec![oracle("a", &ds, 0.0), constant("b", 0.5)], CsgeParams::default()).unwrap();
    ens.fit(&ds).unwrap();
    let w = ens.local_weights(&ds.features[3], ds.timestamps[3], 20);
    assert!(w[0] > w[1]);
}

#[test]
fn empty_index_gives_uniform_local_weights() {
    let (_, ds) = labeled_farm(7, Terrain::Onshore, 5);
    let ens = CsgeEnsemble::new(vec![constant("a", 0.4), constant("b", 0.8)], CsgeParams::default()).unwrap();
    assert_eq!(ens.local_weights(&ds.features[0], ds.timestamps[0], 3), vec![0.5, 0.5]);
    assert_eq!(ens.leadtime_weights(30.0), vec![0.5, 0.5]);
}

#[test]
fn leadtime_buckets_by_hand() {
    let (_, ds) = labeled_farm(8, Terrain::Onshore, 48);
    let flat = with_power(&ds, 0.5);
    let mut ens = CsgeEnsemble::new(vec![constant("a", 0.55), constant("b", 0.65)], params(1.0)).unwrap();
    ens.fit(&flat).unwrap();
    // generated lead times lie in [18, 42)
    let w = ens.leadtime_weights(30.0);
    assert!((w[0] - 0.75).abs() < 1e-9 && (w[1] - 0.25).abs() < 1e-9, "{w:?}");
    assert_eq!(ens.leadtime_weights(2.0), vec![0.5, 0.5]);
    assert_eq!(ens.leadtime_weights(100.0), vec![0.5, 0.5]);
}

#[test]
fn fused_prediction_by_hand() {
    let (_, ds) = labeled_farm(9, Terrain::Onshore, 48);
    // every aspect sees errors 0.1 vs 0.3; η = 1/3 makes the product 3:1
    let mut ens = CsgeEnsemble::new(vec![constant("a", 0.2), constant("b", 0.6)], params(1.0 / 3.0)).unwrap();
    ens.fit(&with_power(&ds, 0.3)).unwrap();
    let p = ens.predict(&ds.features[0], ds.timestamps[0], ds.lead_time[0], 50).unwrap();
    assert!((p.weights[0] - 0.75).abs() < 1e-9, "{:?}", p.weights);
    assert!((p.fused - 0.3).abs() < 1e-9);
}

#[test]
fn single_member_and_attribution() {
    let (_, ds) = labeled_farm(10, Terrain::Onshore, 100);
    let mut solo = CsgeEnsemble::new(vec![constant("a", 0.42)], CsgeParams::default()).unwrap();
    solo.fit(&ds).unwrap();
    let p = solo.predict(&ds.features[5], ds.timestamps[5], 20.0, 10).unwrap();
    assert_eq!(p.weights, vec![1.0]);
    assert_eq!(p.fused, 0.42);

    let mut ens =
        CsgeEnsemble::new(vec![oracle("a", &ds, 0.1), constant("b", 0.3), oracle("c", &ds, -0.2)], CsgeParams::default()).unwrap();
    ens.fit(&ds).unwrap();
    for p in ens.predict_dataset(&ds, 20).unwrap() {
        let preds: Vec<f64> = p.predictions.iter().map(|x| x.unwrap()).collect();
        let dot: f64 = p.weights.iter().zip(&preds).map(|(w, x)| w * x).sum();
        assert!((dot - p.raw).abs() <= 1e-12);
        let lo = preds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(p.raw >= lo - 1e-12 && p.raw <= hi + 1e-12);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn update_rewards_the_accurate_member() {
    let (_, ds) = labeled_farm(11, Terrain::Onshore, 200);
    let first = ds.filter_indices(&(0..100).collect::<Vec<_>>());
    let second = ds.filter_indices(&(100..200).collect::<Vec<_>>());
    // equal errors on the first half, a perfect on the second
    let table: Arc<HashMap<DateTime<Utc>, f64>> = Arc::new(
        (0..ds.len())
            .map(|i| (ds.timestamps[i], ds.power_at(i).unwrap()))
            .collect(),
    );
    let split = ds.timestamps[100];
    let t2 = table.clone();
    let a = Member::new(
        "a",
        FnPredictor(move |_: &_, t: DateTime<Utc>| Ok(if t < split { (t2[&t] + 0.1).min(1.0) } else { t2[&t] })),
    );
    let b = Member::new(
        "b",
        FnPredictor(move |_: &_, t: DateTime<Utc>| Ok((table[&t] + 0.1).min(1.0))),
    );
    let mut ens = CsgeEnsemble::new(vec![a, b], CsgeParams::default()).unwrap();
    ens.fit(&first).unwrap();
    let before = ens.global_weights();
    assert!((before[0] - before[1]).abs() < 1e-12);
    ens.update(&second).unwrap();
    let after = ens.global_weights();
    assert!(after[0] > before[0] && after[1] < before[1]);
}

#[test]
fn window_keeps_only_recent_records() {
    let (_, ds) = labeled_farm(12, Terrain::Onshore, 60);
    let p = CsgeParams {
        window: 10,
        ..CsgeParams::default()
    };
    let members = || vec![oracle("a", &ds, 0.05), constant("b", 0.3)];
    let mut ens = CsgeEnsemble::new(members(), p).unwrap();
    ens.fit(&ds.filter_indices(&(0..30).collect::<Vec<_>>())).unwrap();
    ens.update(&ds.filter_indices(&(30..60).collect::<Vec<_>>())).unwrap();
    let mut fresh = CsgeEnsemble::new(members(), p).unwrap();
    fresh.fit(&ds.filter_indices(&(50..60).collect::<Vec<_>>())).unwrap();
    assert_eq!(ens.history().len(), 10);
    assert_eq!(ens.global_errors(), fresh.global_errors());
    assert_eq!(ens.state().leadtime_errors, fresh.state().leadtime_errors);
}

#[test]
fn shutoff_aware_member_wins_after_update() {
    let (_, ds) = labeled_farm(13, Terrain::Onshore, 24 * 20);
    let night = |t: DateTime<Utc>| t.hour() >= 22 || t.hour() < 6;
    let shut = TimeSeriesDataset {
        power: Some(
            (0..ds.len())
                .map(|i| Some(if night(ds.timestamps[i]) { 0.0 } else { ds.power_at(i).unwrap() }))
                .collect(),
        ),
        ..ds.clone()
    };
    let naive = oracle("naive", &ds, 0.0);
    let aware_inner = oracle("inner", &ds, 0.02);
    let start = ds.timestamps[240];
    let aware = Member::new(
        "aware",
        FnPredictor(move |f: &_, t: DateTime<Utc>| {
            if t >= start && night(t) {
                Ok(0.0)
            } else {
                aware_inner.predictor.predict(f, t)
            }
        }),
    );
    let before_part = ds.filter_indices(&(0..240).collect::<Vec<_>>());
    let after_part = shut.filter_indices(&(240..480).collect::<Vec<_>>());
    let mut ens = CsgeEnsemble::new(vec![naive, aware], CsgeParams::default()).unwrap();
    ens.fit(&before_part).unwrap();
    assert!(ens.global_weights()[0] > ens.global_weights()[1]);
    ens.update(&after_part).unwrap();
    let w = ens.global_weights();
    assert!(w[1] > w[0], "{w:?}");
}

#[test]
fn state_round_trips_through_json() {
    let (_, ds) = labeled_farm(14, Terrain::Onshore, 80);
    let members = || vec![oracle("a", &ds, 0.05), constant("b", 0.3)];
    let mut ens = CsgeEnsemble::new(members(), CsgeParams::default()).unwrap();
    ens.fit(&ds).unwrap();
    let json = ens.to_json().unwrap();
    let state: CsgeState = serde_json::from_str(&json).unwrap();
    let back = CsgeEnsemble::from_state(state, members()).unwrap();
    assert_eq!(back.state(), ens.state());
    let p = ens.predict(&ds.features[1], ds.timestamps[1], 20.0, 10).unwrap();
    let q = back.predict(&ds.features[1], ds.timestamps[1], 20.0, 10).unwrap();
    assert_eq!(p, q);
    let line = windtl::csge::attribution_json_lines(&[p]).unwrap();
    assert_eq!(line.lines().count(), 1);
}

#[test]
fn gate_is_scale_invariant_away_from_epsilon() {
    let e = [0.3, 0.7, 1.9];
    let a = soft_gate(&e, 2.0, 1e-6);
    let b = soft_gate(&e.map(|x| x * 13.0), 2.0, 1e-6);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
}

// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeMap;

use common::{labeled_farm, labeled_series, quick_cfg};
use windtl::data::{Terrain, TimeSeriesDataset, INPUT_DIM};
use windtl::nnet::{self, Standardizer, TrainConfig};
use windtl::preselect::{RankingEntry, SimilarityRanking};
use windtl::synthdata::generate_farm_config;
use windtl::transfer::mtl::{add_task_head, train_mtl, MtlNetwork};
use windtl::transfer::selftrain::self_train;
use windtl::transfer::{
    adapt_new_nwp, consistency_gap, dense_regressor, train_multicross, train_regressor, train_universal,
    train_wp1_naive, ModelDims, MultiCrossData, MultiCrossNetwork, SourceFarm,
};
use windtl::util;

fn holdout_rmse(pred: &[f64], ds: &TimeSeriesDataset) -> f64 {
    let obs: Vec<f64> = ds.labeled_indices().iter().map(|&i| ds.power_at(i).unwrap()).collect();
    util::rmse(pred, &obs)
}

fn tail(ds: &TimeSeriesDataset, fraction: f64) -> TimeSeriesDataset {
    let n = ds.len();
    let start = n - (n as f64 * fraction).round() as usize;
    ds.filter_indices(&(start..n).collect::<Vec<_>>())
}

#[test]
fn twin_target_matches_its_source() {
    let config = generate_farm_config(5, Terrain::Onshore);
    let source_data = labeled_series(&config, 0, 2000, "nwpA", 5);
    let cfg = quick_cfg();
    let source = SourceFarm::train(config.clone(), source_data, 3, &ModelDims::compact(), &cfg).unwrap();
    let target_nwp = labeled_series(&config, 2000, 2000, "nwpA", 6).without_power();
    let holdout = labeled_series(&config, 4000, 720, "nwpA", 7);
    let ranking = SimilarityRanking {
        target_farm_id: "twin".into(),
        entries: vec![RankingEntry {
            source_farm_id: config.farm_id.clone(),
            distance: 0.0,
            terrain_match: true,
        }],
    };
    let student = train_wp1_naive(&ranking, &[source.clone()], &target_nwp, &ModelDims::compact(), &cfg).unwrap();
    let again = train_wp1_naive(&ranking, &[source.clone()], &target_nwp, &ModelDims::compact(), &cfg).unwrap();
    assert_eq!(student, again);
    let own = holdout_rmse(&source.model().predict_dataset(&holdout).unwrap(), &holdout);
    let transferred = holdout_rmse(&student.predict_dataset(&holdout).unwrap(), &holdout);
    assert!(transferred <= 1.05 * own, "{transferred} vs {own}");
}

#[test]
fn universal_model_pools_sources() {
    let (_, ds) = labeled_farm(8, Terrain::Farmland, 400);
    let cfg = TrainConfig { epochs: 5, ..quick_cfg() };
    let model = train_universal(&[ds.clone(), ds.clone()], 4, &ModelDims::compact(), &cfg).unwrap();
    assert!(model.reconstruction_mse().is_finite());
    // duplicated pool has the single farm's training distribution
    let (x, _) = ds.labeled_xy();
    let (n_train, _) = (320, 80);
    let single = Standardizer::fit(&x[..n_train]).unwrap();
    let pooled = model.autoencoder.encoder.standardizer.as_ref().unwrap();
    for (a, b) in single.mean.iter().zip(&pooled.mean) {
        assert!((a - b).abs() < 1e-9);
    }
    for (a, b) in single.std.iter().zip(&pooled.std) {
        assert!((a - b).abs() < 1e-9);
    }
    let pred = model.predict_dataset(&ds).unwrap();
    assert!(pred.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn self_train_without_unlabeled_is_labeled_only() {
    let (_, ds) = labeled_farm(9, Terrain::Onshore, 400);
    let dims = ModelDims::compact();
    let base = dense_regressor(INPUT_DIM, &dims, 1).unwrap();
    let empty = TimeSeriesDataset::empty(ds.farm_id.clone(), ds.nwp_model_id.clone());
    let out = self_train(&base, &ds, &empty, 0.9, 3, 2, &quick_cfg()).unwrap();
    assert!(out.rounds.is_empty());
    assert_eq!(out.final_rmse, out.labeled_only_rmse);
}

#[test]
fn self_train_at_full_threshold_returns_reference() {
    let (config, ds) = labeled_farm(10, Terrain::Onshore, 400);
    let unlabeled = labeled_series(&config, 400, 600, "nwpA", 11).without_power();
    let base = dense_regressor(INPUT_DIM, &ModelDims::compact(), 1).unwrap();
    let out = self_train(&base, &ds, &unlabeled, 1.0, 3, 3, &quick_cfg()).unwrap();
    assert!(out.rounds.is_empty());
    assert_eq!(out.final_rmse, out.labeled_only_rmse);
    assert!(self_train(&base, &ds.without_power(), &unlabeled, 0.9, 1, 2, &quick_cfg()).is_err());
}

fn renamed(ds: &TimeSeriesDataset, farm_id: &str) -> TimeSeriesDataset {
    TimeSeriesDataset {
        farm_id: farm_id.into(),
        ..ds.clone()
    }
}

fn mtl_pair() -> (MtlNetwork, TimeSeriesDataset) {
    let (_, ds) = labeled_farm(12, Terrain::Onshore, 1200);
    let sources = [renamed(&ds, "a"), renamed(&ds, "b")];
    (train_mtl(&sources, &ModelDims::compact(), &quick_cfg()).unwrap(), ds)
}

#[test]
fn mtl_heads_on_identical_tasks_agree() {
    let (mtl, ds) = mtl_pair();
    let val = tail(&ds, 0.2);
    let ra = holdout_rmse(&mtl.predict_dataset("a", &val).unwrap(), &val);
    let rb = holdout_rmse(&mtl.predict_dataset("b", &val).unwrap(), &val);
    assert!((ra - rb).abs() <= 0.1 * ra.max(rb), "{ra} vs {rb}");
    let again = train_mtl(&[renamed(&ds, "a"), renamed(&ds, "b")], &ModelDims::compact(), &quick_cfg()).unwrap();
    assert_eq!(mtl, again);
}

#[test]
fn mtl_prediction_routes_through_own_head() {
    let (mtl, ds) = mtl_pair();
    let inputs = ds.model_inputs();
    let before = mtl.predict("a", &inputs).unwrap();
    let mut corrupted = mtl.clone();
    for w in &mut corrupted.heads.get_mut("b").unwrap().layers[0].weights {
        *w = 1e3;
    }
    assert_eq!(corrupted.predict("a", &inputs).unwrap(), before);
    assert_ne!(corrupted.predict("b", &inputs).unwrap(), mtl.predict("b", &inputs).unwrap());
    let json = mtl.to_json().unwrap();
    assert_eq!(MtlNetwork::from_json(&json).unwrap(), mtl);
}

#[test]
fn mtl_rejects_duplicates() {
    let (_, ds) = labeled_farm(13, Terrain::Onshore, 100);
    assert!(train_mtl(&[ds.clone(), ds.clone()], &ModelDims::compact(), &quick_cfg()).is_err());
    assert!(train_mtl(&[ds.clone()], &ModelDims::compact(), &quick_cfg()).is_err());
}

#[test]
fn task_head_respects_freeze_and_isolation() {
    let (mtl, _) = mtl_pair();
    let (_, little) = labeled_farm(14, Terrain::Onshore, 300);
    let dims = ModelDims::compact();
    let frozen = add_task_head(&mtl, "new", &little, &dims.head, &quick_cfg(), true).unwrap();
    assert_eq!(frozen.trunk, mtl.trunk);
    assert_eq!(frozen.heads["a"], mtl.heads["a"]);
    assert_eq!(frozen.heads["b"], mtl.heads["b"]);
    assert!(frozen.heads.contains_key("new"));

    let free = add_task_head(&mtl, "new", &little, &dims.head, &quick_cfg(), false).unwrap();
    assert_ne!(free.trunk, mtl.trunk);
    assert_eq!(free.heads["a"], mtl.heads["a"]);
    assert_eq!(free.heads["b"], mtl.heads["b"]);

    assert!(add_task_head(&mtl, "a", &little, &dims.head, &quick_cfg(), true).is_err());
}

fn multicross_pool(models: &[&str], farms: &[(u64, Terrain)], hours: usize) -> MultiCrossData {
    let mut data = BTreeMap::new();
    for &(seed, terrain) in farms {
        let config = generate_farm_config(seed, terrain);
        for m in models {
            data.insert(
                (m.to_string(), config.farm_id.clone()),
                labeled_series(&config, 0, hours, m, seed),
            );
        }
    }
    data
}

#[test]
fn multicross_single_pair_reduces_to_plain_training() {
    let data = multicross_pool(&["nwpA"], &[(15, Terrain::Onshore)], 1500);
    let ds = data.values().next().unwrap().clone();
    let dims = ModelDims::compact();
    let cfg = TrainConfig { epochs: 60, ..quick_cfg() };
    let mc = train_multicross(&data, &dims, 0.0, &cfg).unwrap();

    // same architecture and initial weights as one flat network
    let init = train_multicross(&data, &dims, 0.0, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
    let mut plain = init.adapters["nwpA"].clone();
    for part in [&init.trunk, &init.spatial_layer, &init.heads[&ds.farm_id]] {
        plain.layers.extend(part.layers.iter().cloned());
    }
    plain.output_dim = 1;
    plain.freeze_mask = vec![false; plain.layers.len()];
    let (plain, _) = nnet::train(&plain, &ds, &cfg).unwrap();

    let val = tail(&ds, 0.2);
    let r_mc = holdout_rmse(&mc.predict_dataset(&ds.farm_id, &val).unwrap(), &val);
    let r_plain = holdout_rmse(&plain.predict_dataset(&val).unwrap(), &val);
    assert!((r_mc - r_plain).abs() <= 0.05 * r_plain, "{r_mc} vs {r_plain}");
}

#[test]
fn multicross_routing_and_serialization() {
    let data = multicross_pool(&["nwpA", "nwpB"], &[(16, Terrain::Onshore), (17, Terrain::Forest)], 300);
    let cfg = TrainConfig { epochs: 5, ..quick_cfg() };
    let mc = train_multicross(&data, &ModelDims::compact(), 1.0, &cfg).unwrap();
    let ((m, f), ds) = data.iter().next().unwrap();
    let inputs = ds.model_inputs();
    let before = mc.predict(m, f, &inputs).unwrap();

    let mut corrupted = mc.clone();
    for (id, a) in corrupted.adapters.iter_mut() {
        if id != m {
            a.layers[0].weights.iter_mut().for_each(|w| *w = -50.0);
        }
    }
    for (id, h) in corrupted.heads.iter_mut() {
        if id != f {
            h.layers[0].bias.iter_mut().for_each(|b| *b = 50.0);
        }
    }
    assert_eq!(corrupted.predict(m, f, &inputs).unwrap(), before);
    assert!(MultiCrossNetwork::from_json(&mc.to_json().unwrap()).unwrap() == mc);
    assert!(mc.predict("nope", f, &inputs).is_err());
}

#[test]
fn multicross_consistency_shrinks_gap() {
    let data = multicross_pool(&["nwpA", "nwpB"], &[(18, Terrain::Onshore), (19, Terrain::Offshore)], 600);
    let dims = ModelDims::compact();
    let init = train_multicross(&data, &dims, 1.0, &TrainConfig { epochs: 0, ..quick_cfg() }).unwrap();
    let trained = train_multicross(&data, &dims, 1.0, &quick_cfg()).unwrap();
    let (g0, g1) = (
        consistency_gap(&init, &data).unwrap(),
        consistency_gap(&trained, &data).unwrap(),
    );
    assert!(g1 <= 0.5 * g0, "{g1} vs {g0}");
}

#[test]
fn new_adapter_leaves_shared_layers_alone() {
    let data = multicross_pool(&["nwpA", "nwpB"], &[(20, Terrain::Onshore)], 400);
    let cfg = TrainConfig { epochs: 5, ..quick_cfg() };
    let mc = train_multicross(&data, &ModelDims::compact(), 1.0, &cfg).unwrap();
    let config = generate_farm_config(20, Terrain::Onshore);
    let new: BTreeMap<String, TimeSeriesDataset> =
        [(config.farm_id.clone(), labeled_series(&config, 0, 400, "nwpC", 20))].into();

    let adapted = adapt_new_nwp(&mc, "nwpC", &new, &data, &cfg).unwrap();
    assert_eq!(adapted.trunk, mc.trunk);
    assert_eq!(adapted.spatial_layer, mc.spatial_layer);
    assert_eq!(adapted.heads, mc.heads);
    assert_eq!(adapted.adapters["nwpA"], mc.adapters["nwpA"]);
    assert_eq!(adapted.adapters["nwpB"], mc.adapters["nwpB"]);

    let idle = adapt_new_nwp(&mc, "nwpC", &new, &data, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
    for ((m, f), ds) in &data {
        let inputs = ds.model_inputs();
        assert_eq!(idle.predict(m, f, &inputs).unwrap(), mc.predict(m, f, &inputs).unwrap());
    }
    assert!(adapt_new_nwp(&mc, "nwpA", &new, &data, &cfg).is_err());
}

#[test]
fn regressor_outputs_stay_in_unit_interval() {
    let (_, ds) = labeled_farm(22, Terrain::Mountain, 300);
    let net = train_regressor(&ds, &ModelDims::compact(), &quick_cfg()).unwrap();
    assert!(net.predict_dataset(&ds).unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
}

// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};

use super::{
    adapt_to_novelty, detect_novelty, retrieve_similar_situations, run_hours, Evidence, NoveltyEvent, NoveltyKind, Phase,
    PhaseState, StreamPoint,
};
use crate::baseline::{forecast_physical, PhysicalModel};
use crate::csge::{CsgeEnsemble, Member, Observation};
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::nnet::{DenseNetwork, TrainConfig};
use crate::preselect::{rank_sources_by, SimilarityRanking};
use crate::scenario::{build_world, farm_history, Method, ScenarioConfig, World, MONTH_HOURS, SCHEMA_VERSION};
use crate::synthdata::{default_start, EventKind};
use crate::transfer::{
    adapt_new_nwp, add_farm_head, add_task_head, self_train, train_mtl, train_multicross, train_regressor,
    train_universal, train_wp1_naive, MtlNetwork, MultiCrossData, MultiCrossNetwork, SourceFarm, UniversalModel,
};
use crate::util;

pub const METRICS_HEADER: &str = "month,method,rmse,mae,skill";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetric {
    pub month: usize,
    pub method: Method,
    pub rmse: f64,
    pub mae: f64,
    /// `1 - rmse / rmse_physical` for the same month.
    pub skill: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthSummary {
    pub month: usize,
    pub start: DateTime<Utc>,
    pub state: PhaseState,
}

/// One training call. `max_timestamp` is the latest record it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub month: usize,
    pub model: String,
    pub max_timestamp: Option<DateTime<Utc>>,
    pub boundary: DateTime<Utc>,
}

impl AuditEntry {
    pub fn violates(&self) -> bool {
        self.max_timestamp.is_some_and(|t| t >= self.boundary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub month: usize,
    pub kind: NoveltyKind,
    pub model: String,
    pub adapted: bool,
    pub original_rmse: f64,
    pub final_rmse: f64,
    pub retrieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleReport {
    pub schema_version: String,
    pub scenario: ScenarioConfig,
    pub target_farm_id: Option<String>,
    pub ranking: Option<SimilarityRanking>,
    pub months: Vec<MonthSummary>,
    pub metrics: Vec<MethodMetric>,
    pub events: Vec<NoveltyEvent>,
    pub adaptations: Vec<AdaptationRecord>,
    pub audit: Vec<AuditEntry>,
    /// First month where the target-only model beats every transfer method.
    pub crossover_month: Option<usize>,
    pub final_phase: Phase,
}

impl LifecycleReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_HEADER.split(','))?;
        for m in &self.metrics {
            w.write_record([
                m.month.to_string(),
                m.method.to_string(),
                m.rmse.to_string(),
                m.mae.to_string(),
                m.skill.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn audit_violations(&self) -> Vec<&AuditEntry> {
        self.audit.iter().filter(|a| a.violates()).collect()
    }

    pub fn metrics_for(&self, method: Method) -> impl Iterator<Item = &MethodMetric> {
        self.metrics.iter().filter(move |m| m.method == method)
    }
}

fn skill(rmse: f64, physical: f64) -> f64 {
    1.0 - rmse / physical.max(1e-12)
}

struct Run<'a> {
    scenario: &'a ScenarioConfig,
    world: World,
    audit: Vec<AuditEntry>,
    /// Logged out-of-sample forecasts per model id, aligned with operation.
    log: BTreeMap<String, Vec<Option<f64>>>,
}

impl Run<'_> {
    fn cfg(&self, stream: u64) -> TrainConfig {
        self.scenario
            .hyper
            .train
            .with_seed(util::derive_seed(self.scenario.seed, stream))
    }

    fn record(&mut self, month: usize, model: &str, max_timestamp: Option<DateTime<Utc>>, boundary: DateTime<Utc>) {
        self.audit.push(AuditEntry {
            month,
            model: model.to_string(),
            max_timestamp,
            boundary,
        });
    }

    fn log_month(&mut self, id: &str, range: std::ops::Range<usize>, pred: &[f64]) {
        let n = self.world.operation.len();
        let slot = self.log.entry(id.to_string()).or_insert_with(|| vec![None; n]);
        for (i, p) in range.zip(pred) {
            slot[i] = Some(*p);
        }
    }

    fn pool_primary(&self) -> Vec<TimeSeriesDataset> {
        let primary = &self.scenario.nwp_models[0];
        self.world.pool.iter().map(|f| f.history[primary].clone()).collect()
    }
}

/// Per-record multi-cross forecast, routing each record through the adapter
/// of its NWP model when one exists.
fn multicross_predict(net: &MultiCrossNetwork, farm: &str, ds: &TimeSeriesDataset, nwp: &[String], fallback: &str) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in nwp.iter().enumerate() {
        let m = if net.adapters.contains_key(m) { m.as_str() } else { fallback };
        groups.entry(m).or_default().push(i);
    }
    let mut out = vec![0.0; ds.len()];
    for (m, idx) in groups {
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| ds.model_input(i)).collect();
        for (k, p) in net.predict(m, farm, &x)?.into_iter().enumerate() {
            out[idx[k]] = p;
        }
    }
    Ok(out)
}

/// Last pool history hour.
fn pool_end(hours: usize) -> DateTime<Utc> {
    default_start() + Duration::hours(hours as i64 - 1)
}

/// Simulate the target farm month by month. Every month is scored before
/// its labels are revealed for training.
pub fn run_lifecycle(scenario: &ScenarioConfig) -> Result<LifecycleReport> {
    scenario.validate()?;
    let h = &scenario.hyper;
    if scenario.months == 0 {
        return Ok(LifecycleReport {
            schema_version: SCHEMA_VERSION.into(),
            scenario: scenario.clone(),
            target_farm_id: None,
            ranking: None,
            months: Vec::new(),
            metrics: Vec::new(),
            events: Vec::new(),
            adaptations: Vec::new(),
            audit: Vec::new(),
            crossover_month: None,
            final_phase: Phase::NoData,
        });
    }
    let world = build_world(scenario)?;
    let mut run = Run {
        scenario,
        world,
        audit: Vec::new(),
        log: BTreeMap::new(),
    };
    let t0 = run.world.start;
    let pool_last = pool_end(h.history_hours);
    let primary = scenario.nwp_models[0].clone();
    let target_id = run.world.target.farm_id.clone();
    let has = |m: Method| scenario.has(m);
    let need_naive = has(Method::Wp1Naive) || has(Method::SelfTrain) || has(Method::Csge);
    let need_universal = has(Method::Wp1Universal) || has(Method::Csge);
    let need_target = has(Method::TargetOnly) || has(Method::Csge);

    // models fixed at the start of operation
    let pool_primary = run.pool_primary();
    let ranked_pool: Vec<_> = run
        .world
        .pool
        .iter()
        .zip(&pool_primary)
        .map(|(f, d)| (f.config.clone(), d.clone()))
        .collect();
    let needs_ranking = need_naive || need_universal || has(Method::Mtl) || has(Method::Multicross);
    let ranking = if needs_ranking {
        Some(rank_sources_by(
            &ranked_pool,
            &run.world.target,
            &run.world.archive,
            h.top_k,
            h.similarity,
        )?)
    } else {
        None
    };
    let top: Vec<usize> = ranking
        .iter()
        .flat_map(|r| &r.entries)
        .map(|e| run.world.pool.iter().position(|f| f.config.farm_id == e.source_farm_id).unwrap())
        .collect();

    let mut source_models: Vec<(String, DenseNetwork)> = Vec::new();
    let mut naive = None;
    if need_naive {
        let best = top[0];
        let farm = SourceFarm::train(
            run.world.pool[best].config.clone(),
            pool_primary[best].clone(),
            h.replicas,
            &h.dims,
            &run.cfg(0x10),
        )?;
        run.record(0, "source_replicas", Some(pool_last), t0);
        let model = train_wp1_naive(
            ranking.as_ref().unwrap(),
            std::slice::from_ref(&farm),
            &run.world.archive,
            &h.dims,
            &run.cfg(0x11),
        )?;
        run.record(0, Method::Wp1Naive.as_str(), run.world.archive.last_timestamp(), t0);
        source_models.push((format!("source:{}", farm.config.farm_id), farm.model().clone()));
        naive = Some(model);
    }
    if has(Method::Csge) {
        for (k, &i) in top.iter().enumerate().skip(source_models.len()) {
            let model = train_regressor(&pool_primary[i], &h.dims, &run.cfg(0x20 + k as u64))?;
            run.record(0, "source_regressor", Some(pool_last), t0);
            source_models.push((format!("source:{}", run.world.pool[i].config.farm_id), model));
        }
    }
    let top_data: Vec<TimeSeriesDataset> = top.iter().map(|&i| pool_primary[i].clone()).collect();
    let mut universal: Option<UniversalModel> = None;
    if need_universal {
        if top_data.len() >= 2 {
            universal = Some(train_universal(&top_data, h.code_dim, &h.dims, &run.cfg(0x12))?);
            run.record(0, Method::Wp1Universal.as_str(), Some(pool_last), t0);
        } else {
            log::warn!("universal model needs two sources; only {} ranked", top_data.len());
        }
    }
    let mut mtl_base: Option<MtlNetwork> = None;
    if has(Method::Mtl) {
        if top_data.len() >= 2 {
            mtl_base = Some(train_mtl(&top_data, &h.dims, &run.cfg(0x13))?);
            run.record(0, "mtl_trunk", Some(pool_last), t0);
        } else {
            log::warn!("multi-task training needs two sources; mtl disabled");
        }
    }
    let mut mc_data: MultiCrossData = BTreeMap::new();
    let mut mc_base: Option<MultiCrossNetwork> = None;
    if has(Method::Multicross) {
        for &i in &top {
            let farm = &run.world.pool[i];
            for (m, ds) in &farm.history {
                mc_data.insert((m.clone(), farm.config.farm_id.clone()), ds.clone());
            }
        }
        mc_base = Some(train_multicross(&mc_data, &h.dims, h.lambda_consistency, &run.cfg(0x14))?);
        run.record(0, "multicross_trunk", Some(pool_last), t0);
    }

    let physical = PhysicalModel::new(run.world.target.clone());
    let op = run.world.operation.clone();
    let op_nwp = run.world.operation_nwp.clone();
    let physical_all = forecast_physical(&physical, &op)?;

    let mut months = Vec::new();
    let mut metrics = Vec::new();
    let mut events: Vec<NoveltyEvent> = Vec::new();
    let mut adaptations = Vec::new();
    let mut crossover = None;
    let mut phase = Phase::NoData;
    let mut scanned_until: Option<DateTime<Utc>> = None;
    let mut declared: Vec<usize> = Vec::new();

    for month in 0..scenario.months {
        let from = month * MONTH_HOURS;
        let to = ((month + 1) * MONTH_HOURS).min(op.len());
        if from >= to {
            break;
        }
        let boundary = op.timestamps[from];
        let revealed = if scenario.reveal_labels { from } else { 0 };
        let labeled = op.filter_indices(&(0..revealed).collect::<Vec<_>>());
        let labeled_max = labeled.last_timestamp();
        phase = phase.max(PhaseState::for_hours(revealed, h.little_data_hours, h.growing_hours));
        let stream_seed = 0x100 * (month as u64 + 1);

        // declared NWP changes that start before this month ends
        let month_end = op.timestamps[to - 1];
        for (e_idx, e) in scenario.events.iter().enumerate() {
            let EventKind::NwpModelChange { nwp_model_id } = &e.kind else { continue };
            if declared.contains(&e_idx) || e.start > month_end {
                continue;
            }
            declared.push(e_idx);
            events.push(NoveltyEvent {
                kind: NoveltyKind::NwpChangeDeclared,
                detected_at: e.start,
                evidence: Evidence::NwpModel {
                    nwp_model_id: nwp_model_id.clone(),
                },
            });
            if let Some(base) = &mc_base {
                if !base.adapters.contains_key(nwp_model_id) {
                    let mut fresh = BTreeMap::new();
                    for &i in &top {
                        let farm = &run.world.pool[i];
                        let ds = farm_history(&farm.config, default_start(), h.history_hours, nwp_model_id, farm.seed)?;
                        fresh.insert(farm.config.farm_id.clone(), ds);
                    }
                    let adapted = adapt_new_nwp(base, nwp_model_id, &fresh, &mc_data, &run.cfg(stream_seed + 0x15))?;
                    run.record(month, "multicross_adapter", Some(pool_last), boundary);
                    mc_base = Some(adapted);
                }
            }
        }

        let eval_idx: Vec<usize> = (from..to).collect();
        let eval = op.filter_indices(&eval_idx);
        let observed: Vec<f64> = (from..to).map(|i| op.power_at(i).unwrap_or_default()).collect();
        let mut preds: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
        let physical_pred = physical_all[from..to].to_vec();
        run.log_month("physical", from..to, &physical_pred);
        preds.insert(Method::Physical, physical_pred);
        if let Some(m) = &naive {
            let p = m.predict_dataset(&eval)?;
            run.log_month(Method::Wp1Naive.as_str(), from..to, &p);
            preds.insert(Method::Wp1Naive, p);
        }
        if let Some(u) = &universal {
            let p = u.predict_dataset(&eval)?;
            run.log_month(Method::Wp1Universal.as_str(), from..to, &p);
            preds.insert(Method::Wp1Universal, p);
        }
        if has(Method::Csge) {
            for (id, m) in &source_models {
                let p = m.predict_dataset(&eval)?;
                run.log_month(id, from..to, &p);
            }
        }

        let mut active_model: Option<(Method, DenseNetwork)> = None;
        if phase >= Phase::LittleData {
            let mut target_model = None;
            if need_target {
                let model = train_regressor(&labeled, &h.dims, &run.cfg(stream_seed + 1))?;
                run.record(month, Method::TargetOnly.as_str(), labeled_max, boundary);
                target_model = Some(model);
            }
            if has(Method::SelfTrain) {
                let base = naive.as_ref().expect("self-training starts from the WP1 model");
                let archive = &run.world.archive;
                let skip = archive.len().saturating_sub(h.unlabeled_hours);
                let unlabeled = archive.filter_indices(&(skip..archive.len()).collect::<Vec<_>>());
                let out = self_train(
                    base,
                    &labeled,
                    &unlabeled,
                    h.conf_threshold,
                    h.self_train_rounds,
                    h.replicas,
                    &run.cfg(stream_seed + 2),
                )?;
                let max_ts = labeled_max.max(unlabeled.last_timestamp());
                run.record(month, Method::SelfTrain.as_str(), max_ts, boundary);
                active_model = Some((Method::SelfTrain, out.model));
            } else if let Some(m) = &target_model {
                active_model = Some((Method::TargetOnly, m.clone()));
            }

            // novelty detection on the active model's logged forecasts
            if phase == Phase::Growing {
                if let Some((method, model)) = active_model.as_mut() {
                    let stream: Vec<StreamPoint> = run
                        .log
                        .get(method.as_str())
                        .map(|log| {
                            (0..revealed)
                                .filter_map(|i| {
                                    log[i].map(|p| StreamPoint {
                                        timestamp: op.timestamps[i],
                                        prediction: p,
                                        observed: op.power_at(i).unwrap_or_default(),
                                    })
                                })
                                .collect()
                        })
                        .unwrap_or_default();
                    let fresh: Vec<NoveltyEvent> = if stream.is_empty() {
                        Vec::new()
                    } else {
                        detect_novelty(&stream, &h.novelty)?
                            .into_iter()
                            .filter(|e| scanned_until.map_or(true, |s| e.detected_at > s))
                            .collect()
                    };
                    if let Some(last) = stream.last() {
                        scanned_until = Some(last.timestamp);
                    }
                    for event in fresh {
                        let forecast = &run.log[method.as_str()][..revealed];
                        let segment = novel_segment(&labeled, forecast, &event, &h.novelty);
                        let retrieved = retrieve_similar_situations(&pool_primary, &segment, h.retrieval_k)?;
                        let recent = episode_records(&labeled, &event, &h.novelty);
                        let adaptation = adapt_to_novelty(
                            model,
                            &event,
                            &retrieved,
                            &recent,
                            None,
                            &run.cfg(stream_seed + 3 + events.len() as u64),
                        )?;
                        run.record(month, "adaptation", labeled_max.max(Some(pool_last)), boundary);
                        adaptations.push(AdaptationRecord {
                            month,
                            kind: event.kind,
                            model: method.to_string(),
                            adapted: adaptation.adapted,
                            original_rmse: adaptation.original_rmse,
                            final_rmse: adaptation.final_rmse,
                            retrieved: retrieved.len(),
                        });
                        *model = adaptation.model;
                        events.push(event);
                    }
                }
            }

            if let Some(m) = &target_model {
                let p = m.predict_dataset(&eval)?;
                run.log_month("target", from..to, &p);
                if has(Method::TargetOnly) {
                    let p = match &active_model {
                        Some((Method::TargetOnly, adapted)) => adapted.predict_dataset(&eval)?,
                        _ => p,
                    };
                    run.log_month(Method::TargetOnly.as_str(), from..to, &p);
                    preds.insert(Method::TargetOnly, p);
                }
            }
            if let Some((Method::SelfTrain, model)) = &active_model {
                let p = model.predict_dataset(&eval)?;
                run.log_month(Method::SelfTrain.as_str(), from..to, &p);
                preds.insert(Method::SelfTrain, p);
            }
            if let Some(base) = &mtl_base {
                let net = add_task_head(base, &target_id, &labeled, &h.dims.head, &run.cfg(stream_seed + 4), true)?;
                run.record(month, Method::Mtl.as_str(), labeled_max, boundary);
                preds.insert(Method::Mtl, net.predict_dataset(&target_id, &eval)?);
            }
            if let Some(base) = &mc_base {
                let head_data = multicross_head_data(base, &labeled, &op_nwp[..revealed]);
                let net = add_farm_head(base, &target_id, &head_data, &h.dims.head, &run.cfg(stream_seed + 5))?;
                run.record(month, Method::Multicross.as_str(), head_data.last_timestamp(), boundary);
                preds.insert(
                    Method::Multicross,
                    multicross_predict(&net, &target_id, &eval, &op_nwp[from..to], &primary)?,
                );
            }
            if has(Method::Csge) {
                let mut members = vec![Member::new("physical", physical.clone())];
                if let Some(m) = &naive {
                    members.push(Member::new(Method::Wp1Naive.as_str(), m.clone()));
                }
                if let Some(u) = &universal {
                    members.push(Member::new(Method::Wp1Universal.as_str(), u.clone()));
                }
                for (id, m) in &source_models {
                    members.push(Member::new(id.clone(), m.clone()));
                }
                if let Some(m) = &target_model {
                    members.push(Member::new("target", m.clone()));
                }
                let ids: Vec<String> = members.iter().map(|m| m.id.clone()).collect();
                let mut ens = CsgeEnsemble::new(members, h.csge)?;
                let hist_from = revealed.saturating_sub(h.csge.window);
                let observations: Vec<Observation> = (hist_from..revealed)
                    .map(|i| Observation {
                        timestamp: op.timestamps[i],
                        features: op.features[i],
                        lead_time: op.lead_time[i],
                        observed: op.power_at(i).unwrap_or_default(),
                        predictions: ids.iter().map(|id| run.log.get(id).and_then(|l| l[i])).collect(),
                    })
                    .collect();
                ens.observe(observations)?;
                let fused = ens.predict_dataset(&eval, h.csge.neighbors)?;
                preds.insert(Method::Csge, fused.into_iter().map(|p| p.fused).collect());
            }
        }

        let phys_rmse = util::rmse(&preds[&Method::Physical], &observed);
        let mut month_rmse: BTreeMap<Method, f64> = BTreeMap::new();
        for (method, p) in &preds {
            if !has(*method) {
                continue;
            }
            let rmse = util::rmse(p, &observed);
            month_rmse.insert(*method, rmse);
            metrics.push(MethodMetric {
                month,
                method: *method,
                rmse,
                mae: util::mae(p, &observed),
                skill: skill(rmse, phys_rmse),
                n: observed.len(),
            });
        }
        if crossover.is_none() {
            if let Some(own) = month_rmse.get(&Method::TargetOnly) {
                let transfer: Vec<f64> = month_rmse
                    .iter()
                    .filter(|(m, _)| m.is_transfer())
                    .map(|(_, r)| *r)
                    .collect();
                if !transfer.is_empty() && transfer.iter().all(|r| own < r) {
                    crossover = Some(month);
                }
            }
        }
        months.push(MonthSummary {
            month,
            start: boundary,
            state: PhaseState {
                phase,
                labeled_hours: revealed,
                active_model_ids: month_rmse.keys().map(|m| m.to_string()).collect(),
            },
        });
        log::info!("month {month}: phase {phase:?}, {} methods scored", month_rmse.len());
    }

    Ok(LifecycleReport {
        schema_version: SCHEMA_VERSION.into(),
        scenario: scenario.clone(),
        target_farm_id: Some(target_id),
        ranking,
        months,
        metrics,
        events,
        adaptations,
        audit: run.audit,
        crossover_month: crossover,
        final_phase: phase,
    })
}

/// Labeled target records behind a novelty event: zeros inside the clock
/// interval where `forecast` expected power, or the rolling window of a
/// regime shift.
fn novel_segment(
    labeled: &TimeSeriesDataset,
    forecast: &[Option<f64>],
    event: &NoveltyEvent,
    params: &super::NoveltyParams,
) -> TimeSeriesDataset {
    let n = labeled.len();
    let idx: Vec<usize> = match &event.evidence {
        Evidence::ClockInterval {
            from_hour,
            to_hour,
            since,
        } => {
            let hours: Vec<u32> = run_hours(*from_hour, *to_hour).collect();
            (0..n)
                .filter(|&i| {
                    labeled.timestamps[i] >= *since
                        && hours.contains(&labeled.timestamps[i].hour())
                        && labeled.power_at(i) == Some(0.0)
                        && forecast[i].is_some_and(|p| p > params.prediction_floor)
                })
                .collect()
        }
        _ => (n.saturating_sub(params.window)..n).collect(),
    };
    labeled.filter_indices(&idx)
}

/// Target records since the onset of `event`: the zero interval's first day,
/// or the rolling window of a regime shift.
fn episode_records(labeled: &TimeSeriesDataset, event: &NoveltyEvent, params: &super::NoveltyParams) -> TimeSeriesDataset {
    let n = labeled.len();
    let from = match &event.evidence {
        Evidence::ClockInterval { since, .. } => labeled.timestamps.partition_point(|t| t < since),
        _ => n.saturating_sub(params.window),
    };
    labeled.filter_indices(&(from..n).collect::<Vec<_>>())
}

/// The target's labeled rows under the NWP model with an adapter and the
/// most records.
fn multicross_head_data(net: &MultiCrossNetwork, labeled: &TimeSeriesDataset, nwp: &[String]) -> TimeSeriesDataset {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in nwp.iter().filter(|m| net.adapters.contains_key(m.as_str())) {
        *counts.entry(m).or_default() += 1;
    }
    let Some((best, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
        return labeled.clone();
    };
    let idx: Vec<usize> = (0..labeled.len()).filter(|&i| nwp[i] == *best).collect();
    let mut ds = labeled.filter_indices(&idx);
    ds.nwp_model_id = best.to_string();
    ds
}

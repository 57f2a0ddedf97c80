// SPDX-License-Identifier: Apache-2.0

//! Multi-cross-learning: per-NWP input adapters feeding a shared trunk, a
//! shared spatial layer and per-farm heads, trained on every
//! (NWP model, farm) pair at once. A consistency penalty pulls the trunk
//! outputs of different NWP models together on timestamp-aligned records,
//! so a new NWP model only needs a new adapter.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::mtl::{chain_mse, head_network, round_robin, trunk_network, Shuffler, TaskData};
use super::{chain, ModelDims};
use crate::data::{TimeSeriesDataset, INPUT_DIM};
use crate::error::{Error, Result};
use crate::nnet::{self, init_network, Activation, DenseNetwork, Gradients, Momentum, Standardizer, TrainConfig};
use crate::util;

/// Labeled datasets keyed by `(nwp_model_id, farm_id)`.
pub type MultiCrossData = BTreeMap<(String, String), TimeSeriesDataset>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiCrossNetwork {
    pub adapters: BTreeMap<String, DenseNetwork>,
    pub trunk: DenseNetwork,
    pub spatial_layer: DenseNetwork,
    pub heads: BTreeMap<String, DenseNetwork>,
    pub abstraction_dim: usize,
    pub lambda_consistency: f64,
}

impl MultiCrossNetwork {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() || self.heads.is_empty() {
            return Err(Error::validation("adapters/heads", "need at least one adapter and one head"));
        }
        for (id, a) in &self.adapters {
            a.validate()?;
            if a.output_dim != self.abstraction_dim {
                return Err(Error::validation(format!("adapters.{id}"), "adapter output differs from abstraction"));
            }
        }
        self.trunk.validate()?;
        self.spatial_layer.validate()?;
        if self.trunk.input_dim != self.abstraction_dim || self.spatial_layer.input_dim != self.trunk.output_dim {
            return Err(Error::validation("trunk/spatial_layer", "dimensions do not chain"));
        }
        for (id, h) in &self.heads {
            h.validate()?;
            if h.input_dim != self.spatial_layer.output_dim {
                return Err(Error::validation(format!("heads.{id}"), "head input differs from spatial output"));
            }
        }
        Ok(())
    }

    fn adapter(&self, nwp: &str) -> Result<&DenseNetwork> {
        self.adapters
            .get(nwp)
            .ok_or_else(|| Error::validation("nwp_model_id", format!("no adapter for `{nwp}`")))
    }

    fn head(&self, farm: &str) -> Result<&DenseNetwork> {
        self.heads
            .get(farm)
            .ok_or_else(|| Error::validation("farm_id", format!("no head for `{farm}`")))
    }

    /// Forecast for `(nwp, farm)` from raw model inputs.
    pub fn predict(&self, nwp: &str, farm: &str, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let nets = [self.adapter(nwp)?, &self.trunk, &self.spatial_layer, self.head(farm)?];
        if inputs.iter().any(|x| x.len() != INPUT_DIM) {
            return Err(Error::validation("x", "dimension mismatch"));
        }
        Ok(chain::predict(&nets, inputs))
    }

    pub fn predict_dataset(&self, farm: &str, data: &TimeSeriesDataset) -> Result<Vec<f64>> {
        self.predict(&data.nwp_model_id, farm, &data.model_inputs())
    }

    /// Shared NWP abstraction (trunk output) for inputs of model `nwp`.
    pub fn abstraction(&self, nwp: &str, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(chain::embed(&[self.adapter(nwp)?, &self.trunk], inputs))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: MultiCrossNetwork = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

fn adapter_network(dims: &ModelDims, seed: u64) -> Result<DenseNetwork> {
    init_network(
        &[INPUT_DIM, dims.adapter_hidden, dims.abstraction],
        &[Activation::Tanh, Activation::Tanh],
        seed,
    )
}

/// Timestamps of labeled records, aligned with `labeled_xy`.
fn labeled_times(ds: &TimeSeriesDataset) -> Vec<DateTime<Utc>> {
    ds.labeled_indices().into_iter().map(|i| ds.timestamps[i]).collect()
}

/// Mean squared distance between trunk outputs of different NWP models on
/// timestamp-aligned records of the same farm, pooled over every model pair.
pub fn consistency_gap(net: &MultiCrossNetwork, data: &MultiCrossData) -> Result<f64> {
    let farms: BTreeSet<&String> = data.keys().map(|(_, f)| f).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for farm in farms {
        let models: Vec<(&String, &TimeSeriesDataset)> = data
            .iter()
            .filter(|((_, f), _)| f == farm)
            .map(|((m, _), d)| (m, d))
            .filter(|(m, _)| net.adapters.contains_key(*m))
            .collect();
        for (i, (m1, d1)) in models.iter().enumerate() {
            for (m2, d2) in models.iter().skip(i + 1) {
                let index: HashMap<DateTime<Utc>, usize> =
                    d2.timestamps.iter().enumerate().map(|(j, t)| (*t, j)).collect();
                let pairs: Vec<(usize, usize)> = d1
                    .timestamps
                    .iter()
                    .enumerate()
                    .filter_map(|(k, t)| index.get(t).map(|j| (k, *j)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let x1: Vec<Vec<f64>> = pairs.iter().map(|(k, _)| d1.model_input(*k)).collect();
                let x2: Vec<Vec<f64>> = pairs.iter().map(|(_, j)| d2.model_input(*j)).collect();
                let a1 = net.abstraction(m1, &x1)?;
                let a2 = net.abstraction(m2, &x2)?;
                for (u, v) in a1.iter().zip(&a2) {
                    total += u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                }
                count += pairs.len();
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

struct Task {
    nwp: usize,
    farm: usize,
    data: TaskData,
    /// Partner task and `row -> partner row` for aligned training rows.
    partner: Option<(usize, HashMap<usize, usize>)>,
}

fn gather(x: &[f64], idx: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

/// `λ · mean_rows ‖a1 − a2‖²` and its gradient w.r.t. `a1` (the gradient
/// w.r.t. `a2` is the negation).
fn consistency_loss_grad(a1: &[f64], a2: &[f64], rows: usize, lambda: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; a1.len()];
    for ((g, p), q) in grad.iter_mut().zip(a1).zip(a2) {
        let d = p - q;
        loss += d * d;
        *g = 2.0 * lambda * d / rows as f64;
    }
    (lambda * loss / rows as f64, grad)
}

fn partner_map(tasks: &[(usize, usize, Vec<DateTime<Utc>>, usize)], t: usize) -> Option<(usize, HashMap<usize, usize>)> {
    let (nwp, farm, ref times, n_train) = tasks[t];
    let mut candidates: Vec<usize> = (0..tasks.len())
        .filter(|&u| tasks[u].1 == farm && tasks[u].0 != nwp)
        .collect();
    // next model after `nwp` in sorted order, cyclically
    candidates.sort_by_key(|&u| (tasks[u].0 <= nwp, tasks[u].0));
    let u = *candidates.first()?;
    let index: HashMap<DateTime<Utc>, usize> = tasks[u].2[..tasks[u].3].iter().enumerate().map(|(j, t)| (*t, j)).collect();
    let map: HashMap<usize, usize> = times[..n_train]
        .iter()
        .enumerate()
        .filter_map(|(i, t)| index.get(t).map(|j| (i, *j)))
        .collect();
    (!map.is_empty()).then_some((u, map))
}

/// Joint training over every `(nwp_model_id, farm_id)` dataset. The loss is
/// the prediction MSE of each pair plus `lambda_consistency` times the
/// squared trunk-output distance between NWP models on aligned timestamps.
pub fn train_multicross(
    data: &MultiCrossData,
    dims: &ModelDims,
    lambda_consistency: f64,
    cfg: &TrainConfig,
) -> Result<MultiCrossNetwork> {
    cfg.validate()?;
    dims.validate()?;
    if !(lambda_consistency >= 0.0) {
        return Err(Error::validation("lambda_consistency", "must be non-negative"));
    }
    if data.is_empty() {
        return Err(Error::EmptyRequest("no datasets for multi-cross training".into()));
    }
    let nwps: Vec<String> = data.keys().map(|(m, _)| m.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let farms: Vec<String> = data.keys().map(|(_, f)| f.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if nwps.len() < 2 && lambda_consistency > 0.0 {
        log::warn!("only one NWP model present; consistency term skipped");
    }
    let use_consistency = nwps.len() >= 2 && lambda_consistency > 0.0;

    // Per-NWP standardizers over the pooled training rows.
    let mut rows: BTreeMap<&(String, String), (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for (key, ds) in data {
        let (x, y) = ds.labeled_xy();
        if x.is_empty() {
            return Err(Error::EmptyRequest(format!("dataset ({}, {}) has no labels", key.0, key.1)));
        }
        rows.insert(key, (x, y));
    }
    let mut scalers = BTreeMap::new();
    for nwp in &nwps {
        let mut pooled = Vec::new();
        for ((m, _), (x, _)) in &rows {
            if m == nwp {
                let (n_train, _) = nnet::split_sizes(x.len(), cfg.validation_fraction);
                pooled.extend(x[..n_train].iter().cloned());
            }
        }
        scalers.insert(nwp.clone(), Standardizer::fit(&pooled)?);
    }

    let meta: Vec<(usize, usize, Vec<DateTime<Utc>>, usize)> = data
        .iter()
        .map(|((m, f), ds)| {
            let (n_train, _) = nnet::split_sizes(ds.labeled_count(), cfg.validation_fraction);
            (
                nwps.iter().position(|x| x == m).unwrap(),
                farms.iter().position(|x| x == f).unwrap(),
                labeled_times(ds),
                n_train,
            )
        })
        .collect();
    let mut tasks: Vec<Task> = Vec::with_capacity(data.len());
    for (t, (key, (x, y))) in rows.iter().enumerate() {
        tasks.push(Task {
            nwp: meta[t].0,
            farm: meta[t].1,
            data: TaskData::from_rows(x, y, &scalers[&key.0], cfg.validation_fraction),
            partner: if use_consistency { partner_map(&meta, t) } else { None },
        });
    }

    let mut adapters: Vec<DenseNetwork> = nwps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut a = adapter_network(dims, util::derive_seed(cfg.seed, 0xD00 + i as u64))?;
            a.standardizer = Some(scalers[m].clone());
            Ok(a)
        })
        .collect::<Result<_>>()?;
    let mut trunk = trunk_network(dims.abstraction, &dims.trunk, util::derive_seed(cfg.seed, 0xD80))?;
    let mut spatial = init_network(
        &[dims.trunk_out(), dims.spatial],
        &[Activation::Tanh],
        util::derive_seed(cfg.seed, 0xD90),
    )?;
    let mut heads: Vec<DenseNetwork> = (0..farms.len())
        .map(|i| head_network(dims.spatial, &dims.head, util::derive_seed(cfg.seed, 0xDA0 + i as u64)))
        .collect::<Result<_>>()?;

    let val_loss = |adapters: &[DenseNetwork], trunk: &DenseNetwork, spatial: &DenseNetwork, heads: &[DenseNetwork]| {
        let with_val: Vec<&Task> = tasks.iter().filter(|t| t.data.n_val > 0).collect();
        if with_val.is_empty() {
            return None;
        }
        let total: f64 = with_val
            .iter()
            .map(|t| {
                chain_mse(
                    &[&adapters[t.nwp], trunk, spatial, &heads[t.farm]],
                    &t.data.val_x,
                    &t.data.val_y,
                    t.data.n_val,
                )
            })
            .sum();
        Some(total / with_val.len() as f64)
    };

    let mut adapter_m: Vec<Momentum> = adapters.iter().map(Momentum::new).collect();
    let mut trunk_m = Momentum::new(&trunk);
    let mut spatial_m = Momentum::new(&spatial);
    let mut head_m: Vec<Momentum> = heads.iter().map(Momentum::new).collect();
    type Snapshot = (f64, Vec<DenseNetwork>, DenseNetwork, DenseNetwork, Vec<DenseNetwork>);
    let mut best: Option<Snapshot> = val_loss(&adapters, &trunk, &spatial, &heads)
        .map(|v| (v, adapters.clone(), trunk.clone(), spatial.clone(), heads.clone()));
    let mut since_best = 0;
    let sizes: Vec<usize> = tasks.iter().map(|t| t.data.n_train).collect();
    let mut shuffler = Shuffler::new(&sizes, cfg.seed);
    let (lr, l2) = (cfg.learning_rate, cfg.l2);

    for epoch in 0..cfg.epochs {
        let queues = shuffler.epoch(cfg.batch_size);
        for (ti, step) in round_robin(&queues) {
            let task = &tasks[ti];
            let idx = &queues[ti][step];
            let (bx, by) = task.data.batch(idx, INPUT_DIM);
            let nets = [&adapters[task.nwp], &trunk, &spatial, &heads[task.farm]];
            let traces = chain::forward(&nets, &bx, idx.len());
            let (loss, d_out) = nnet::mse_loss_grad(traces[3].output(), &by, None, 1);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            let mut grads = chain::backward(&nets, &traces, &d_out);
            let mut partner_grad: Option<(usize, Gradients)> = None;
            if let Some((pt, map)) = &task.partner {
                let aligned: Vec<(usize, usize)> = idx.iter().filter_map(|i| map.get(i).map(|j| (*i, *j))).collect();
                if !aligned.is_empty() {
                    let other = &tasks[*pt];
                    let r = aligned.len();
                    let x1 = gather(&task.data.train_x, &aligned.iter().map(|p| p.0).collect::<Vec<_>>(), INPUT_DIM);
                    let x2 = gather(&other.data.train_x, &aligned.iter().map(|p| p.1).collect::<Vec<_>>(), INPUT_DIM);
                    let n1 = [&adapters[task.nwp], &trunk];
                    let n2 = [&adapters[other.nwp], &trunk];
                    let t1 = chain::forward(&n1, &x1, r);
                    let t2 = chain::forward(&n2, &x2, r);
                    let (closs, g1) = consistency_loss_grad(t1[1].output(), t2[1].output(), r, lambda_consistency);
                    if !closs.is_finite() {
                        return Err(Error::Diverged(format!("non-finite consistency loss at epoch {epoch}")));
                    }
                    let g2: Vec<f64> = g1.iter().map(|g| -g).collect();
                    let c1 = chain::backward(&n1, &t1, &g1);
                    let c2 = chain::backward(&n2, &t2, &g2);
                    grads[0].accumulate(&c1[0]);
                    grads[1].accumulate(&c1[1]);
                    grads[1].accumulate(&c2[1]);
                    partner_grad = Some((other.nwp, c2[0].clone()));
                }
            }
            let (nwp, farm) = (task.nwp, task.farm);
            adapter_m[nwp].step(&mut adapters[nwp], &grads[0], lr, l2);
            trunk_m.step(&mut trunk, &grads[1], lr, l2);
            spatial_m.step(&mut spatial, &grads[2], lr, l2);
            head_m[farm].step(&mut heads[farm], &grads[3], lr, l2);
            if let Some((m2, g)) = partner_grad {
                adapter_m[m2].step(&mut adapters[m2], &g, lr, l2);
            }
        }
        if let (Some(v), Some(b)) = (val_loss(&adapters, &trunk, &spatial, &heads), best.as_mut()) {
            if v < b.0 {
                *b = (v, adapters.clone(), trunk.clone(), spatial.clone(), heads.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, a, t, s, h)) = best {
        adapters = a;
        trunk = t;
        spatial = s;
        heads = h;
    }
    Ok(MultiCrossNetwork {
        adapters: nwps.into_iter().zip(adapters).collect(),
        trunk,
        spatial_layer: spatial,
        heads: farms.into_iter().zip(heads).collect(),
        abstraction_dim: dims.abstraction,
        lambda_consistency,
    })
}

/// Fit an adapter for a new NWP model while every shared layer and head stays
/// frozen. `reference` supplies existing NWP data; on timestamps aligned with
/// it the new adapter is also pulled towards the existing abstraction.
pub fn adapt_new_nwp(
    net: &MultiCrossNetwork,
    new_nwp_model_id: &str,
    new_nwp_data: &BTreeMap<String, TimeSeriesDataset>,
    reference: &MultiCrossData,
    cfg: &TrainConfig,
) -> Result<MultiCrossNetwork> {
    cfg.validate()?;
    if net.adapters.contains_key(new_nwp_model_id) {
        return Err(Error::validation(
            "nwp_model_id",
            format!("adapter `{new_nwp_model_id}` already exists"),
        ));
    }
    if new_nwp_data.is_empty() {
        return Err(Error::EmptyRequest("no data for the new NWP model".into()));
    }
    let template = net.adapters.values().next().expect("validated network has an adapter");
    let mut pooled = Vec::new();
    let mut per_farm = Vec::new();
    for (farm, ds) in new_nwp_data {
        net.head(farm)?;
        let (x, y) = ds.labeled_xy();
        if x.is_empty() {
            return Err(Error::EmptyRequest(format!("no labels for farm `{farm}`")));
        }
        let (n_train, _) = nnet::split_sizes(x.len(), cfg.validation_fraction);
        pooled.extend(x[..n_train].iter().cloned());
        per_farm.push((farm.clone(), ds, x, y, n_train));
    }
    let scaler = Standardizer::fit(&pooled)?;
    let mut adapter = init_network(
        &template.layer_dims(),
        &template.activations(),
        util::derive_seed(cfg.seed, 0xE00 ^ util::fnv1a(new_nwp_model_id)),
    )?;
    adapter.standardizer = Some(scaler.clone());

    // Frozen targets for the consistency term: abstraction of the first
    // existing model with aligned records for the farm.
    struct FarmTask {
        head: usize,
        data: TaskData,
        targets: HashMap<usize, Vec<f64>>,
    }
    let head_ids: Vec<&String> = net.heads.keys().collect();
    let mut tasks = Vec::new();
    for (farm, ds, x, y, n_train) in per_farm {
        let times = labeled_times(ds);
        let mut targets = HashMap::new();
        if net.lambda_consistency > 0.0 {
            if let Some(((m, _), refds)) = reference
                .iter()
                .find(|((m, f), _)| *f == farm && net.adapters.contains_key(m) && m != new_nwp_model_id)
            {
                let index: HashMap<DateTime<Utc>, usize> =
                    refds.timestamps.iter().enumerate().map(|(j, t)| (*t, j)).collect();
                let pairs: Vec<(usize, usize)> = times[..n_train]
                    .iter()
                    .enumerate()
                    .filter_map(|(i, t)| index.get(t).map(|j| (i, *j)))
                    .collect();
                let xs: Vec<Vec<f64>> = pairs.iter().map(|(_, j)| refds.model_input(*j)).collect();
                let abs = net.abstraction(m, &xs)?;
                targets = pairs.into_iter().map(|(i, _)| i).zip(abs).collect();
            }
        }
        tasks.push(FarmTask {
            head: head_ids.iter().position(|h| **h == farm).unwrap(),
            data: TaskData::from_rows(&x, &y, &scaler, cfg.validation_fraction),
            targets,
        });
    }
    let heads: Vec<&DenseNetwork> = net.heads.values().collect();
    let val_loss = |adapter: &DenseNetwork| {
        let with_val: Vec<&FarmTask> = tasks.iter().filter(|t| t.data.n_val > 0).collect();
        if with_val.is_empty() {
            return None;
        }
        let total: f64 = with_val
            .iter()
            .map(|t| {
                chain_mse(
                    &[adapter, &net.trunk, &net.spatial_layer, heads[t.head]],
                    &t.data.val_x,
                    &t.data.val_y,
                    t.data.n_val,
                )
            })
            .sum();
        Some(total / with_val.len() as f64)
    };

    let mut momentum = Momentum::new(&adapter);
    let mut best = val_loss(&adapter).map(|v| (v, adapter.clone()));
    let mut since_best = 0;
    let sizes: Vec<usize> = tasks.iter().map(|t| t.data.n_train).collect();
    let mut shuffler = Shuffler::new(&sizes, cfg.seed);
    for epoch in 0..cfg.epochs {
        let queues = shuffler.epoch(cfg.batch_size);
        for (ti, step) in round_robin(&queues) {
            let task = &tasks[ti];
            let idx = &queues[ti][step];
            let (bx, by) = task.data.batch(idx, INPUT_DIM);
            let nets = [&adapter, &net.trunk, &net.spatial_layer, heads[task.head]];
            let traces = chain::forward(&nets, &bx, idx.len());
            let (loss, d_out) = nnet::mse_loss_grad(traces[3].output(), &by, None, 1);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            let mut grads = chain::backward(&nets, &traces, &d_out);
            let aligned: Vec<usize> = idx.iter().copied().filter(|i| task.targets.contains_key(i)).collect();
            if !aligned.is_empty() {
                let r = aligned.len();
                let x1 = gather(&task.data.train_x, &aligned, INPUT_DIM);
                let n1 = [&adapter, &net.trunk];
                let t1 = chain::forward(&n1, &x1, r);
                let target: Vec<f64> = aligned.iter().flat_map(|i| task.targets[i].iter().copied()).collect();
                let (_, g1) = consistency_loss_grad(t1[1].output(), &target, r, net.lambda_consistency);
                let c1 = chain::backward(&n1, &t1, &g1);
                grads[0].accumulate(&c1[0]);
            }
            momentum.step(&mut adapter, &grads[0], cfg.learning_rate, cfg.l2);
        }
        if let (Some(v), Some(b)) = (val_loss(&adapter), best.as_mut()) {
            if v < b.0 {
                *b = (v, adapter.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, a)) = best {
        adapter = a;
    }
    let mut out = net.clone();
    out.adapters.insert(new_nwp_model_id.to_string(), adapter);
    Ok(out)
}

/// Train a head for a new farm from its data under an existing NWP model.
/// Adapters, trunk, spatial layer and existing heads stay frozen.
pub fn add_farm_head(
    net: &MultiCrossNetwork,
    farm_id: &str,
    data: &TimeSeriesDataset,
    head_widths: &[usize],
    cfg: &TrainConfig,
) -> Result<MultiCrossNetwork> {
    cfg.validate()?;
    if net.heads.contains_key(farm_id) {
        return Err(Error::validation("farm_id", format!("farm `{farm_id}` already has a head")));
    }
    let adapter = net.adapter(&data.nwp_model_id)?;
    let (x, y) = data.labeled_xy();
    if x.is_empty() {
        return Err(Error::EmptyRequest("no labeled records for the new head".into()));
    }
    let scaler = adapter
        .standardizer
        .clone()
        .unwrap_or_else(|| Standardizer::identity(INPUT_DIM));
    let task = TaskData::from_rows(&x, &y, &scaler, cfg.validation_fraction);
    // the frozen prefix is evaluated once
    let prefix = [adapter, &net.trunk, &net.spatial_layer];
    let embed = |x: &[f64], rows: usize| -> Vec<f64> {
        if rows == 0 {
            return Vec::new();
        }
        chain::forward(&prefix, x, rows).last().unwrap().output().to_vec()
    };
    let d = net.spatial_layer.output_dim;
    let train_z = embed(&task.train_x, task.n_train);
    let val_z = embed(&task.val_x, task.n_val);
    let mut head = head_network(d, head_widths, util::derive_seed(cfg.seed, 0xF00 ^ util::fnv1a(farm_id)))?;
    let mut momentum = Momentum::new(&head);
    let mut shuffler = Shuffler::new(&[task.n_train], cfg.seed);
    let val = |h: &DenseNetwork| (task.n_val > 0).then(|| chain_mse(&[h], &val_z, &task.val_y, task.n_val));
    let mut best = val(&head).map(|v| (v, head.clone()));
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let queues = shuffler.epoch(cfg.batch_size);
        for idx in &queues[0] {
            let bz = gather(&train_z, idx, d);
            let by: Vec<f64> = idx.iter().map(|&i| task.train_y[i]).collect();
            let trace = head.forward_batch_std(&bz, idx.len());
            let (loss, d_out) = nnet::mse_loss_grad(trace.output(), &by, None, 1);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            let (g, _) = head.backward_batch(&trace, &d_out, false);
            momentum.step(&mut head, &g, cfg.learning_rate, cfg.l2);
        }
        if let (Some(v), Some(b)) = (val(&head), best.as_mut()) {
            if v < b.0 {
                *b = (v, head.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, h)) = best {
        head = h;
    }
    let mut out = net.clone();
    out.heads.insert(farm_id.to_string(), head);
    Ok(out)
}

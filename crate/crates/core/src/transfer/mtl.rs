// SPDX-License-Identifier: Apache-2.0

//! Hard parameter sharing: one trunk shared by every farm, one head per farm.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{chain, ModelDims};
use crate::data::{TimeSeriesDataset, INPUT_DIM};
use crate::error::{Error, Result};
use crate::nnet::{self, init_network, Activation, DenseNetwork, Momentum, Standardizer, TrainConfig};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlNetwork {
    pub input_dim: usize,
    pub trunk_out_dim: usize,
    pub trunk: DenseNetwork,
    pub heads: BTreeMap<String, DenseNetwork>,
}

impl MtlNetwork {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.trunk.input_dim != self.input_dim || self.trunk.output_dim != self.trunk_out_dim {
            return Err(Error::validation("trunk", "dimension mismatch"));
        }
        for (id, h) in &self.heads {
            h.validate()?;
            if h.input_dim != self.trunk_out_dim {
                return Err(Error::validation(format!("heads.{id}"), "head input differs from trunk output"));
            }
        }
        Ok(())
    }

    /// Forecast for `farm_id`, using the trunk and that farm's head only.
    pub fn predict(&self, farm_id: &str, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let head = self
            .heads
            .get(farm_id)
            .ok_or_else(|| Error::validation("farm_id", format!("no head for `{farm_id}`")))?;
        for x in inputs {
            if x.len() != self.input_dim {
                return Err(Error::validation("x", "dimension mismatch"));
            }
        }
        Ok(chain::predict(&[&self.trunk, head], inputs))
    }

    pub fn predict_dataset(&self, farm_id: &str, data: &TimeSeriesDataset) -> Result<Vec<f64>> {
        self.predict(farm_id, &data.model_inputs())
    }

    /// Trunk and one head collapsed into a single network.
    pub fn flatten(&self, farm_id: &str) -> Result<DenseNetwork> {
        let head = self
            .heads
            .get(farm_id)
            .ok_or_else(|| Error::validation("farm_id", format!("no head for `{farm_id}`")))?;
        let mut net = self.trunk.clone();
        net.layers.extend(head.layers.iter().cloned());
        net.freeze_mask = vec![false; self.trunk.layer_count()];
        net.freeze_mask.extend(vec![false; head.layer_count()]);
        net.output_dim = head.output_dim;
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: MtlNetwork = serde_json::from_str(s)?;
        net.validate()?;
        Ok(net)
    }
}

pub(crate) fn trunk_network(input_dim: usize, widths: &[usize], seed: u64) -> Result<DenseNetwork> {
    let mut dims = vec![input_dim];
    dims.extend(widths);
    init_network(&dims, &vec![Activation::Tanh; widths.len()], seed)
}

pub(crate) fn head_network(input_dim: usize, widths: &[usize], seed: u64) -> Result<DenseNetwork> {
    let mut dims = vec![input_dim];
    dims.extend(widths);
    dims.push(1);
    let mut acts = vec![Activation::Tanh; widths.len()];
    acts.push(Activation::Sigmoid);
    init_network(&dims, &acts, seed)
}

/// Training and validation rows of one task.
pub(crate) struct TaskData {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub n_train: usize,
    pub val_x: Vec<f64>,
    pub val_y: Vec<f64>,
    pub n_val: usize,
}

impl TaskData {
    pub fn from_rows(x: &[Vec<f64>], y: &[f64], scaler: &Standardizer, fraction: f64) -> Self {
        let (n_train, n_val) = nnet::split_sizes(x.len(), fraction);
        let flat = |rows: &[Vec<f64>]| rows.iter().flat_map(|r| scaler.standardize(r)).collect::<Vec<_>>();
        Self {
            train_x: flat(&x[..n_train]),
            train_y: y[..n_train].to_vec(),
            n_train,
            val_x: flat(&x[n_train..]),
            val_y: y[n_train..].to_vec(),
            n_val,
        }
    }

    pub fn batch(&self, idx: &[usize], din: usize) -> (Vec<f64>, Vec<f64>) {
        let mut bx = Vec::with_capacity(idx.len() * din);
        let mut by = Vec::with_capacity(idx.len());
        for &i in idx {
            bx.extend_from_slice(&self.train_x[i * din..(i + 1) * din]);
            by.push(self.train_y[i]);
        }
        (bx, by)
    }
}

/// Mean squared error of a chain on pre-standardized rows.
pub(crate) fn chain_mse(nets: &[&DenseNetwork], x_std: &[f64], y: &[f64], rows: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    let mut se = 0.0;
    let din = nets[0].input_dim;
    for start in (0..rows).step_by(256) {
        let end = (start + 256).min(rows);
        let traces = chain::forward(nets, &x_std[start * din..end * din], end - start);
        se += traces
            .last()
            .unwrap()
            .output()
            .iter()
            .zip(&y[start..end])
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    se / rows as f64
}

/// Per-task row orders, reshuffled in place every epoch the same way single
/// network training shuffles its rows.
pub(crate) struct Shuffler {
    orders: Vec<Vec<usize>>,
    rng: util::Rng,
}

impl Shuffler {
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        Self {
            orders: sizes.iter().map(|&n| (0..n).collect()).collect(),
            rng: util::rng(seed, nnet::SHUFFLE_STREAM),
        }
    }

    /// Mini-batch queues of the next epoch.
    pub fn epoch(&mut self, batch: usize) -> Vec<Vec<Vec<usize>>> {
        self.orders
            .iter_mut()
            .map(|order| {
                order.shuffle(&mut self.rng);
                order.chunks(batch).map(<[usize]>::to_vec).collect()
            })
            .collect()
    }
}

/// Interleave task batches: task 0, task 1, …, task 0, … until every queue
/// is drained.
pub(crate) fn round_robin(queues: &[Vec<Vec<usize>>]) -> Vec<(usize, usize)> {
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for step in 0..longest {
        for (task, q) in queues.iter().enumerate() {
            if step < q.len() {
                out.push((task, step));
            }
        }
    }
    out
}

/// Joint training of a shared trunk and one head per source farm. Every
/// gradient step takes one mini-batch from one farm, cycling through the
/// farms in order, and updates the trunk and that farm's head.
pub fn train_mtl(sources: &[TimeSeriesDataset], dims: &ModelDims, cfg: &TrainConfig) -> Result<MtlNetwork> {
    cfg.validate()?;
    dims.validate()?;
    if sources.len() < 2 {
        return Err(Error::validation("sources", "multi-task training needs at least two farms"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in sources {
        if !seen.insert(s.farm_id.as_str()) {
            return Err(Error::validation("sources", format!("duplicate farm id `{}`", s.farm_id)));
        }
    }
    let rows: Vec<(Vec<Vec<f64>>, Vec<f64>)> = sources.iter().map(TimeSeriesDataset::labeled_xy).collect();
    if rows.iter().any(|(x, _)| x.is_empty()) {
        return Err(Error::EmptyRequest("every source needs labeled records".into()));
    }
    let mut pooled = Vec::new();
    for (x, _) in &rows {
        let (n_train, _) = nnet::split_sizes(x.len(), cfg.validation_fraction);
        pooled.extend(x[..n_train].iter().cloned());
    }
    let scaler = Standardizer::fit(&pooled)?;
    let tasks: Vec<TaskData> = rows
        .iter()
        .map(|(x, y)| TaskData::from_rows(x, y, &scaler, cfg.validation_fraction))
        .collect();

    let mut trunk = trunk_network(INPUT_DIM, &dims.trunk, cfg.seed)?;
    trunk.standardizer = Some(scaler);
    let mut heads: Vec<DenseNetwork> = sources
        .iter()
        .enumerate()
        .map(|(i, _)| head_network(dims.trunk_out(), &dims.head, util::derive_seed(cfg.seed, 0xB00 + i as u64)))
        .collect::<Result<_>>()?;

    let validation_loss = |trunk: &DenseNetwork, heads: &[DenseNetwork]| -> Option<f64> {
        let with_val: Vec<_> = tasks.iter().enumerate().filter(|(_, t)| t.n_val > 0).collect();
        if with_val.is_empty() {
            return None;
        }
        let total: f64 = with_val
            .iter()
            .map(|(i, t)| chain_mse(&[trunk, &heads[*i]], &t.val_x, &t.val_y, t.n_val))
            .sum();
        Some(total / with_val.len() as f64)
    };

    let mut trunk_m = Momentum::new(&trunk);
    let mut head_m: Vec<Momentum> = heads.iter().map(Momentum::new).collect();
    let sizes: Vec<usize> = tasks.iter().map(|t| t.n_train).collect();
    let mut shuffler = Shuffler::new(&sizes, cfg.seed);
    let mut best = validation_loss(&trunk, &heads).map(|v| (v, trunk.clone(), heads.clone()));
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let queues = shuffler.epoch(cfg.batch_size);
        for (task, step) in round_robin(&queues) {
            let idx = &queues[task][step];
            let (bx, by) = tasks[task].batch(idx, INPUT_DIM);
            let nets = [&trunk, &heads[task]];
            let traces = chain::forward(&nets, &bx, idx.len());
            let (loss, d_out) = nnet::mse_loss_grad(traces[1].output(), &by, None, 1);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = chain::backward(&nets, &traces, &d_out);
            trunk_m.step(&mut trunk, &grads[0], cfg.learning_rate, cfg.l2);
            head_m[task].step(&mut heads[task], &grads[1], cfg.learning_rate, cfg.l2);
        }
        if let (Some(v), Some(b)) = (validation_loss(&trunk, &heads), best.as_mut()) {
            if v < b.0 {
                *b = (v, trunk.clone(), heads.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, t, h)) = best {
        trunk = t;
        heads = h;
    }
    Ok(MtlNetwork {
        input_dim: INPUT_DIM,
        trunk_out_dim: dims.trunk_out(),
        trunk,
        heads: sources.iter().map(|s| s.farm_id.clone()).zip(heads).collect(),
    })
}

/// Train a head for a new farm on `little_data`. Existing heads are never
/// touched; with `freeze_trunk` the trunk is left bitwise unchanged too.
pub fn add_task_head(
    mtl: &MtlNetwork,
    new_farm_id: &str,
    little_data: &TimeSeriesDataset,
    head_widths: &[usize],
    cfg: &TrainConfig,
    freeze_trunk: bool,
) -> Result<MtlNetwork> {
    cfg.validate()?;
    if mtl.heads.contains_key(new_farm_id) {
        return Err(Error::validation("new_farm_id", format!("farm `{new_farm_id}` already has a head")));
    }
    let (x, y) = little_data.labeled_xy();
    if x.is_empty() {
        return Err(Error::EmptyRequest("no labeled records for the new head".into()));
    }
    let scaler = mtl
        .trunk
        .standardizer
        .clone()
        .unwrap_or_else(|| Standardizer::identity(mtl.input_dim));
    let task = TaskData::from_rows(&x, &y, &scaler, cfg.validation_fraction);
    let mut trunk = mtl.trunk.clone();
    let mut head = head_network(mtl.trunk_out_dim, head_widths, cfg.seed)?;
    let mut trunk_m = Momentum::new(&trunk);
    let mut head_m = Momentum::new(&head);
    let mut shuffler = Shuffler::new(&[task.n_train], cfg.seed);
    let val = |t: &DenseNetwork, h: &DenseNetwork| (task.n_val > 0).then(|| chain_mse(&[t, h], &task.val_x, &task.val_y, task.n_val));
    let mut best = val(&trunk, &head).map(|v| (v, trunk.clone(), head.clone()));
    let mut since_best = 0;
    for _ in 0..cfg.epochs {
        let queues = shuffler.epoch(cfg.batch_size);
        for idx in &queues[0] {
            let (bx, by) = task.batch(idx, mtl.input_dim);
            let nets = [&trunk, &head];
            let traces = chain::forward(&nets, &bx, idx.len());
            let (loss, d_out) = nnet::mse_loss_grad(traces[1].output(), &by, None, 1);
            if !loss.is_finite() {
                return Err(Error::Diverged("non-finite loss while training a task head".into()));
            }
            let grads = chain::backward(&nets, &traces, &d_out);
            if !freeze_trunk {
                trunk_m.step(&mut trunk, &grads[0], cfg.learning_rate, cfg.l2);
            }
            head_m.step(&mut head, &grads[1], cfg.learning_rate, cfg.l2);
        }
        if let (Some(v), Some(b)) = (val(&trunk, &head), best.as_mut()) {
            if v < b.0 {
                *b = (v, trunk.clone(), head.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    if let Some((_, t, h)) = best {
        trunk = t;
        head = h;
    }
    let mut out = mtl.clone();
    if !freeze_trunk {
        out.trunk = trunk;
    }
    out.heads.insert(new_farm_id.to_string(), head);
    Ok(out)
}

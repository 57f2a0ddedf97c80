// SPDX-License-Identifier: Apache-2.0

//! Self-training with a negative-transfer guard.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ReplicaEnsemble;
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::nnet::{self, DenseNetwork, Samples, TrainConfig};
use crate::util;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainRound {
    /// Pseudo-labeled records added in this round.
    pub admitted: usize,
    pub holdout_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainOutcome {
    pub model: DenseNetwork,
    /// Hold-out RMSE of the model trained on labeled data only.
    pub labeled_only_rmse: f64,
    /// Hold-out RMSE of the returned model.
    pub final_rmse: f64,
    pub rounds: Vec<SelfTrainRound>,
}

fn holdout_rmse(net: &DenseNetwork, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let pred = net.predict_many(x)?;
    let obs: Vec<f64> = y.iter().map(|v| v[0]).collect();
    Ok(util::rmse(&pred, &obs))
}

/// Self-training of `base` on `labeled` plus confident pseudo-labels of
/// `unlabeled`.
///
/// Round 0 finetunes `base` on the labeled training split; that model is the
/// labeled-only reference. Each further round finetunes `replicas` copies of
/// the current model with distinct seeds, pseudo-labels the remaining
/// unlabeled records, admits those with confidence ≥ `conf_threshold` and
/// retrains on labeled plus admitted records. The loop ends when nothing new
/// qualifies, after `max_rounds`, or when the hold-out RMSE worsens; the
/// best model seen on the hold-out is returned.
pub fn self_train(
    base: &DenseNetwork,
    labeled: &TimeSeriesDataset,
    unlabeled: &TimeSeriesDataset,
    conf_threshold: f64,
    max_rounds: usize,
    replicas: usize,
    cfg: &TrainConfig,
) -> Result<SelfTrainOutcome> {
    if !(conf_threshold > 0.0 && conf_threshold <= 1.0) {
        return Err(Error::validation("conf_threshold", "must lie in (0, 1]"));
    }
    if replicas < 2 {
        return Err(Error::validation("replicas", "at least two replicas are required"));
    }
    let (x, y) = labeled.labeled_xy();
    if x.is_empty() {
        return Err(Error::EmptyRequest("self-training needs labeled records".into()));
    }
    let y: Vec<Vec<f64>> = y.into_iter().map(|v| vec![v]).collect();
    let (n_train, _) = nnet::split_sizes(x.len(), cfg.validation_fraction.max(0.2));
    let (train_x, hold_x) = x.split_at(n_train);
    let (train_y, hold_y) = y.split_at(n_train);
    let hold = (!hold_x.is_empty()).then(|| Samples::new(hold_x, hold_y));
    let score = |net: &DenseNetwork| -> Result<f64> {
        if hold_x.is_empty() {
            Ok(0.0)
        } else {
            holdout_rmse(net, hold_x, hold_y)
        }
    };

    let (mut current, _) = nnet::train_with_validation(base, Samples::new(train_x, train_y), hold, cfg)?;
    let labeled_only_rmse = score(&current)?;
    let mut best = (labeled_only_rmse, current.clone());
    let mut rounds = Vec::new();

    let pool_x = unlabeled.model_inputs();
    let mut admitted = vec![false; pool_x.len()];
    let mut extra_x: Vec<Vec<f64>> = Vec::new();
    let mut extra_y: Vec<Vec<f64>> = Vec::new();

    for round in 0..max_rounds {
        if admitted.iter().all(|a| *a) {
            break;
        }
        let reps = (0..replicas)
            .into_par_iter()
            .map(|r| {
                let seed = util::derive_seed(cfg.seed, 0xA00 + (round * replicas + r) as u64);
                let rcfg = cfg.with_seed(seed);
                Ok(nnet::train_with_validation(&current, Samples::new(train_x, train_y), hold, &rcfg)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let calib = if hold_x.is_empty() { train_x } else { hold_x };
        let ensemble = ReplicaEnsemble::calibrate(reps, calib)?;
        let pending: Vec<usize> = (0..pool_x.len()).filter(|i| !admitted[*i]).collect();
        let pending_x: Vec<Vec<f64>> = pending.iter().map(|&i| pool_x[i].clone()).collect();
        let (mean, std) = ensemble.mean_std(&pending_x)?;
        let mut added = 0;
        for (k, &i) in pending.iter().enumerate() {
            if ensemble.confidence(std[k]) >= conf_threshold {
                admitted[i] = true;
                extra_x.push(pool_x[i].clone());
                extra_y.push(vec![mean[k].clamp(0.0, 1.0)]);
                added += 1;
            }
        }
        if added == 0 {
            break;
        }
        let mut all_x = train_x.to_vec();
        all_x.extend(extra_x.iter().cloned());
        let mut all_y = train_y.to_vec();
        all_y.extend(extra_y.iter().cloned());
        let (next, _) = nnet::train_with_validation(&current, Samples::new(&all_x, &all_y), hold, cfg)?;
        let rmse = score(&next)?;
        rounds.push(SelfTrainRound {
            admitted: added,
            holdout_rmse: rmse,
        });
        if rmse > best.0 {
            break;
        }
        best = (rmse, next.clone());
        current = next;
    }

    Ok(SelfTrainOutcome {
        model: best.1,
        labeled_only_rmse,
        final_rmse: best.0,
        rounds,
    })
}

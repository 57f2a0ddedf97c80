// SPDX-License-Identifier: Apache-2.0

//! Transfer methods: pseudo-labeling from replica ensembles, the naive
//! pseudo-label model and the autoencoder-based universal model for farms
//! without power history, self-training, multi-task networks with hard
//! parameter sharing, and multi-cross-learning over several NWP models.

mod chain;
pub mod multicross;
pub mod mtl;
pub mod selftrain;

pub use multicross::{adapt_new_nwp, add_farm_head, consistency_gap, train_multicross, MultiCrossData, MultiCrossNetwork};
pub use mtl::{add_task_head, train_mtl, MtlNetwork};
pub use selftrain::{self_train, SelfTrainOutcome, SelfTrainRound, DEFAULT_CONF_THRESHOLD};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FarmConfig, TimeSeriesDataset, INPUT_DIM};
use crate::error::{Error, Result};
use crate::nnet::{
    self, init_network, train_autoencoder, train_with_validation, Activation, Autoencoder, AutoencoderSpec,
    DenseNetwork, Samples, TrainConfig,
};
use crate::preselect::SimilarityRanking;
use crate::util;

/// Replica count used for pseudo-labeling confidence.
pub const DEFAULT_REPLICAS: usize = 5;

/// Percentile of replica disagreement on validation data that maps to zero
/// confidence.
pub const CONFIDENCE_PERCENTILE: f64 = 95.0;

/// Layer widths of every learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Hidden widths of a shared trunk (and of the first part of a plain
    /// regressor).
    pub trunk: Vec<usize>,
    /// Hidden widths of a task head before its single output.
    pub head: Vec<usize>,
    pub code_dim: usize,
    pub adapter_hidden: usize,
    /// Width of the NWP abstraction produced by every adapter.
    pub abstraction: usize,
    /// Width of the shared spatial layer in multi-cross networks.
    pub spatial: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            trunk: vec![64, 64],
            head: vec![16],
            code_dim: 4,
            adapter_hidden: 16,
            abstraction: 16,
            spatial: 32,
        }
    }
}

impl ModelDims {
    /// Narrow widths for fast desk-scale runs.
    pub fn compact() -> Self {
        Self {
            trunk: vec![16],
            head: vec![8],
            code_dim: 4,
            adapter_hidden: 8,
            abstraction: 8,
            spatial: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .trunk
            .iter()
            .chain(&self.head)
            .chain([&self.code_dim, &self.adapter_hidden, &self.abstraction, &self.spatial]);
        if all.into_iter().any(|d| *d == 0) {
            return Err(Error::validation("dims", "all widths must be positive"));
        }
        if self.trunk.is_empty() {
            return Err(Error::validation("dims.trunk", "need at least one trunk layer"));
        }
        Ok(())
    }

    pub fn trunk_out(&self) -> usize {
        *self.trunk.last().unwrap()
    }
}

/// Plain regressor `input → trunk → head → 1` with tanh hidden units and a
/// sigmoid output.
pub fn dense_regressor(input_dim: usize, dims: &ModelDims, seed: u64) -> Result<DenseNetwork> {
    let mut layer_dims = vec![input_dim];
    layer_dims.extend(&dims.trunk);
    layer_dims.extend(&dims.head);
    layer_dims.push(1);
    let mut acts = vec![Activation::Tanh; layer_dims.len() - 2];
    acts.push(Activation::Sigmoid);
    init_network(&layer_dims, &acts, seed)
}

/// Train a fresh regressor on the labeled records of `data`.
pub fn train_regressor(data: &TimeSeriesDataset, dims: &ModelDims, cfg: &TrainConfig) -> Result<DenseNetwork> {
    let net = dense_regressor(INPUT_DIM, dims, cfg.seed)?;
    Ok(nnet::train(&net, data, cfg)?.0)
}

/// Independently seeded replicas of one task plus the disagreement scale
/// used to turn replica spread into confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEnsemble {
    pub replicas: Vec<DenseNetwork>,
    /// Replica-std percentile on the calibration inputs.
    pub s_max: f64,
}

impl ReplicaEnsemble {
    /// Measure `s_max` on `validation_inputs`.
    pub fn calibrate(replicas: Vec<DenseNetwork>, validation_inputs: &[Vec<f64>]) -> Result<Self> {
        if replicas.len() < 2 {
            return Err(Error::validation("replicas", "at least two replicas are required"));
        }
        let mut ens = Self { replicas, s_max: 0.0 };
        if !validation_inputs.is_empty() {
            let (_, stds) = ens.mean_std(validation_inputs)?;
            ens.s_max = util::percentile(&stds, CONFIDENCE_PERCENTILE);
        }
        Ok(ens)
    }

    /// Train `count` replicas on `data` with seeds derived from `cfg.seed`
    /// and calibrate on the validation tail.
    pub fn train(data: &TimeSeriesDataset, count: usize, dims: &ModelDims, cfg: &TrainConfig) -> Result<Self> {
        if count < 2 {
            return Err(Error::validation("count", "at least two replicas are required"));
        }
        let (x, y) = data.labeled_xy();
        let (n_train, _) = nnet::split_sizes(x.len(), cfg.validation_fraction);
        let y: Vec<Vec<f64>> = y.into_iter().map(|v| vec![v]).collect();
        let replicas = (0..count)
            .into_par_iter()
            .map(|r| {
                let seed = util::derive_seed(cfg.seed, 0x800 + r as u64);
                let net = dense_regressor(INPUT_DIM, dims, seed)?;
                Ok(nnet::train_samples(&net, Samples::new(&x, &y), &cfg.with_seed(seed))?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let calib = if n_train < x.len() { &x[n_train..] } else { &x[..] };
        Self::calibrate(replicas, calib)
    }

    /// Per-row mean and population std of replica predictions.
    pub fn mean_std(&self, inputs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let preds = self
            .replicas
            .iter()
            .map(|r| r.predict_many(inputs))
            .collect::<Result<Vec<_>>>()?;
        let mut means = Vec::with_capacity(inputs.len());
        let mut stds = Vec::with_capacity(inputs.len());
        let mut column = vec![0.0; preds.len()];
        for i in 0..inputs.len() {
            for (c, p) in column.iter_mut().zip(&preds) {
                *c = p[i];
            }
            means.push(util::mean(&column));
            stds.push(util::std_dev(&column));
        }
        Ok((means, stds))
    }

    /// Confidence `1 − clamp(std / s_max, 0, 1)`; with `s_max = 0` only
    /// perfect agreement is confident.
    pub fn confidence(&self, std: f64) -> f64 {
        if self.s_max > 0.0 {
            1.0 - (std / self.s_max).clamp(0.0, 1.0)
        } else if std == 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Target records labeled by a source model's replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledDataset {
    pub base: TimeSeriesDataset,
    pub confidence: Vec<f64>,
    pub source_model_id: String,
}

impl PseudoLabeledDataset {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.confidence.len() != self.base.len() {
            return Err(Error::validation("confidence", "length differs from record count"));
        }
        if self.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation("confidence", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Hourly CSV schema with a trailing `confidence` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        self.base.write_csv(writer, Some(&self.confidence))
    }
}

/// Label `target_nwp` with the mean replica prediction and attach a
/// confidence derived from replica disagreement.
pub fn pseudo_label(
    ensemble: &ReplicaEnsemble,
    target_nwp: &TimeSeriesDataset,
    source_model_id: &str,
) -> Result<PseudoLabeledDataset> {
    if ensemble.replicas.len() < 2 {
        return Err(Error::validation("replicas", "at least two replicas are required"));
    }
    if target_nwp.is_labeled() {
        return Err(Error::validation("target_nwp.power", "target must be unlabeled"));
    }
    let (mean, std) = ensemble.mean_std(&target_nwp.model_inputs())?;
    let confidence = std.iter().map(|s| ensemble.confidence(*s)).collect();
    let base = TimeSeriesDataset {
        power: Some(mean.into_iter().map(|p| Some(p.clamp(0.0, 1.0))).collect()),
        ..target_nwp.clone()
    };
    Ok(PseudoLabeledDataset {
        base,
        confidence,
        source_model_id: source_model_id.to_string(),
    })
}

/// A pool farm with its labeled history and trained replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFarm {
    pub config: FarmConfig,
    pub data: TimeSeriesDataset,
    pub replicas: ReplicaEnsemble,
}

impl SourceFarm {
    pub fn train(config: FarmConfig, data: TimeSeriesDataset, replicas: usize, dims: &ModelDims, cfg: &TrainConfig) -> Result<Self> {
        let replicas = ReplicaEnsemble::train(&data, replicas, dims, cfg)?;
        Ok(Self { config, data, replicas })
    }

    /// The first replica, used as this farm's forecast model.
    pub fn model(&self) -> &DenseNetwork {
        &self.replicas.replicas[0]
    }
}

/// Pseudo-label the target's NWP history with the closest source and train
/// a fresh regressor on it, weighting each record by its confidence.
pub fn train_wp1_naive(
    ranking: &SimilarityRanking,
    sources: &[SourceFarm],
    target_nwp: &TimeSeriesDataset,
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<DenseNetwork> {
    let top = ranking
        .top()
        .ok_or_else(|| Error::EmptyRequest("similarity ranking is empty".into()))?;
    let source = sources
        .iter()
        .find(|s| s.config.farm_id == top.source_farm_id)
        .ok_or_else(|| Error::validation("sources", format!("no source farm `{}`", top.source_farm_id)))?;
    let labeled = pseudo_label(&source.replicas, target_nwp, &top.source_farm_id)?;
    train_on_pseudo_labels(&labeled, dims, cfg)
}

/// Confidence-weighted regression on pseudo-labels.
pub fn train_on_pseudo_labels(labeled: &PseudoLabeledDataset, dims: &ModelDims, cfg: &TrainConfig) -> Result<DenseNetwork> {
    if labeled.confidence.iter().all(|c| *c <= 0.0) {
        return Err(Error::Runtime("no usable pseudo-labels: every confidence is zero".into()));
    }
    let (x, y) = labeled.base.labeled_xy();
    let y: Vec<Vec<f64>> = y.into_iter().map(|v| vec![v]).collect();
    let net = dense_regressor(INPUT_DIM, dims, cfg.seed)?;
    let samples = Samples::weighted(&x, &y, &labeled.confidence);
    Ok(nnet::train_samples(&net, samples, cfg)?.0)
}

/// Autoencoder over pooled source inputs and a regressor on its codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalModel {
    pub autoencoder: Autoencoder,
    pub regressor: DenseNetwork,
}

impl UniversalModel {
    pub fn predict_inputs(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let codes = inputs
            .iter()
            .map(|x| nnet::encode(&self.autoencoder.encoder, x))
            .collect::<Result<Vec<_>>>()?;
        self.regressor.predict_many(&codes)
    }

    pub fn predict_dataset(&self, data: &TimeSeriesDataset) -> Result<Vec<f64>> {
        self.predict_inputs(&data.model_inputs())
    }

    pub fn reconstruction_mse(&self) -> f64 {
        self.autoencoder.reconstruction_mse
    }
}

/// Stack labeled records of several datasets, holding out each dataset's
/// chronological tail for validation.
pub(crate) fn pooled_split(
    sources: &[TimeSeriesDataset],
    fraction: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in sources {
        let (x, y) = s.labeled_xy();
        let (n_train, _) = nnet::split_sizes(x.len(), fraction);
        for (i, (xi, yi)) in x.into_iter().zip(y).enumerate() {
            if i < n_train {
                tx.push(xi);
                ty.push(vec![yi]);
            } else {
                vx.push(xi);
                vy.push(vec![yi]);
            }
        }
    }
    (tx, ty, vx, vy)
}

/// Universal model over at least two labeled source datasets.
pub fn train_universal(
    sources: &[TimeSeriesDataset],
    code_dim: usize,
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<UniversalModel> {
    if sources.len() < 2 {
        return Err(Error::validation("sources", "at least two source datasets are required"));
    }
    let (tx, ty, vx, vy) = pooled_split(sources, cfg.validation_fraction);
    if tx.is_empty() {
        return Err(Error::EmptyRequest("sources carry no labeled records".into()));
    }
    let spec = AutoencoderSpec {
        code_dim,
        hidden: Vec::new(),
        activation: Activation::Tanh,
    };
    // Autoencoder sees training rows only; its own tail split is the
    // sources' validation rows.
    let mut ae_rows = tx.clone();
    ae_rows.extend(vx.iter().cloned());
    let ae_cfg = TrainConfig {
        validation_fraction: vx.len() as f64 / ae_rows.len() as f64,
        ..cfg.clone()
    };
    let autoencoder = train_autoencoder(&ae_rows, &spec, &ae_cfg)?;
    let code = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        rows.iter().map(|x| nnet::encode(&autoencoder.encoder, x)).collect()
    };
    let (ctx, cvx) = (code(&tx)?, code(&vx)?);
    let regressor = dense_regressor(code_dim, dims, util::derive_seed(cfg.seed, 0x900))?;
    let val = (!cvx.is_empty()).then(|| Samples::new(&cvx, &vy));
    let (regressor, _) = train_with_validation(&regressor, Samples::new(&ctx, &ty), val, cfg)?;
    Ok(UniversalModel {
        autoencoder,
        regressor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Terrain;
    use crate::synthdata::{generate_farm_config, generate_nwp_series, generate_power_series, TRUTH_MODEL_ID};

    pub(crate) fn labeled_farm(seed: u64, terrain: Terrain, hours: usize) -> (FarmConfig, TimeSeriesDataset) {
        let cfg = generate_farm_config(seed, terrain);
        let truth = generate_nwp_series(&cfg, hours, TRUTH_MODEL_ID, seed).unwrap();
        let power = generate_power_series(&cfg, &truth, &[], seed).unwrap();
        let nwp = generate_nwp_series(&cfg, hours, "nwpA", seed).unwrap();
        (cfg, nwp.with_power_from(&power))
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.02,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_replicas_are_fully_confident() {
        let (_, ds) = labeled_farm(1, Terrain::Onshore, 300);
        let net = train_regressor(&ds, &ModelDims::compact(), &quick_cfg()).unwrap();
        let ens = ReplicaEnsemble::calibrate(vec![net.clone(), net], &ds.model_inputs()).unwrap();
        let pl = pseudo_label(&ens, &ds.without_power(), "src").unwrap();
        assert!(pl.confidence.iter().all(|c| *c == 1.0));
        pl.validate().unwrap();
    }

    #[test]
    fn fewer_than_two_replicas_rejected() {
        let net = dense_regressor(INPUT_DIM, &ModelDims::compact(), 0).unwrap();
        assert!(ReplicaEnsemble::calibrate(vec![net], &[]).is_err());
    }

    #[test]
    fn confidence_is_anti_monotone_in_std() {
        let net = dense_regressor(INPUT_DIM, &ModelDims::compact(), 0).unwrap();
        let ens = ReplicaEnsemble {
            replicas: vec![net.clone(), net],
            s_max: 0.08,
        };
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let c = ens.confidence(k as f64 * 0.002);
            assert!(c <= prev);
            prev = c;
        }
        assert_eq!(ens.confidence(0.5), 0.0);
    }

    #[test]
    fn all_zero_confidence_is_rejected() {
        let (_, ds) = labeled_farm(2, Terrain::Onshore, 100);
        let pl = PseudoLabeledDataset {
            confidence: vec![0.0; ds.len()],
            base: ds,
            source_model_id: "x".into(),
        };
        let err = train_on_pseudo_labels(&pl, &ModelDims::compact(), &quick_cfg()).unwrap_err();
        assert!(err.to_string().contains("no usable pseudo-labels"));
    }

    #[test]
    fn pseudo_labeled_csv_has_confidence_column() {
        let (_, ds) = labeled_farm(2, Terrain::Onshore, 3);
        let pl = PseudoLabeledDataset {
            confidence: vec![0.5; 3],
            base: ds,
            source_model_id: "x".into(),
        };
        let mut buf = Vec::new();
        pl.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",power,confidence"));
        assert!(text.lines().nth(1).unwrap().ends_with(",0.5"));
    }

    #[test]
    fn universal_requires_two_sources() {
        let (_, ds) = labeled_farm(2, Terrain::Onshore, 50);
        assert!(train_universal(&[ds], 4, &ModelDims::compact(), &quick_cfg()).is_err());
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Source-farm pre-selection: terrain rules, ws100 marginal or power-curve
//! distance and permutation feature influence.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baseline::PhysicalModel;
use crate::data::{FarmConfig, Terrain, TimeSeriesDataset, INPUT_NAMES};
use crate::error::{Error, Result};
use crate::nnet::DenseNetwork;
use crate::util;

/// Shuffles averaged per feature in [`rank_feature_influence`].
pub const PERMUTATION_REPEATS: usize = 5;

/// Importances below this are treated as sampling noise and clamped to zero.
pub const IMPORTANCE_NOISE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub source_farm_id: String,
    pub distance: f64,
    pub terrain_match: bool,
}

/// Candidate sources for one target, closest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRanking {
    pub target_farm_id: String,
    pub entries: Vec<RankingEntry>,
}

impl SimilarityRanking {
    pub fn top(&self) -> Option<&RankingEntry> {
        self.entries.first()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Empirical quantile of the sorted sample `sorted` at level `(i + 0.5) / m`,
/// using the inverse of the empirical CDF.
fn quantile_at(sorted: &[f64], i: usize, m: usize) -> f64 {
    let n = sorted.len();
    // index j such that j/n < (i+0.5)/m <= (j+1)/n
    let j = ((i as f64 + 0.5) * n as f64 / m as f64).floor() as usize;
    sorted[j.min(n - 1)]
}

/// 1-D Wasserstein-1 distance between two empirical samples.
///
/// Both samples are resampled onto a common grid of `max(|a|, |b|)`
/// quantile levels and the mean absolute difference of the aligned
/// quantiles is returned. For equal sizes this is the exact optimal
/// transport cost between the two empirical measures.
pub fn wasserstein1(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::validation("sample", "Wasserstein distance needs non-empty samples"));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(Error::validation("sample", "samples must be finite"));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let m = a.len().max(b.len());
    let total: f64 = (0..m)
        .map(|i| (quantile_at(&a, i, m) - quantile_at(&b, i, m)).abs())
        .sum();
    Ok(total / m as f64)
}

/// Farms whose terrain matches `target_terrain`, each flagged as a match.
/// Without any match the whole pool comes back flagged as non-matching.
pub fn terrain_filter(pool: &[FarmConfig], target_terrain: Terrain) -> Vec<(FarmConfig, bool)> {
    let matching: Vec<_> = pool
        .iter()
        .filter(|f| f.terrain == target_terrain)
        .map(|f| (f.clone(), true))
        .collect();
    if matching.is_empty() {
        pool.iter().map(|f| (f.clone(), false)).collect()
    } else {
        matching
    }
}

/// Statistic used to order candidate sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Wasserstein-1 between the ws100 marginals.
    WindSpeed,
    /// Mean absolute gap between the source's and the target's physical
    /// power curves, evaluated on the target's NWP series.
    #[default]
    PowerCurve,
}

/// Mean |P_source(x) − P_target(x)| over the records of `target_nwp`, with
/// both farms' physical power curves.
pub fn curve_distance(source: &FarmConfig, target: &FarmConfig, target_nwp: &TimeSeriesDataset) -> Result<f64> {
    if target_nwp.is_empty() {
        return Err(Error::EmptyRequest("target NWP series is empty".into()));
    }
    let (s, t) = (PhysicalModel::new(source.clone()), PhysicalModel::new(target.clone()));
    let gaps = target_nwp
        .features
        .iter()
        .map(|f| Ok((s.predict(f)? - t.predict(f)?).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(util::mean(&gaps))
}

fn rank_by(
    pool: &[(FarmConfig, TimeSeriesDataset)],
    target_nwp: &TimeSeriesDataset,
    target_terrain: Terrain,
    k: usize,
    distance: impl Fn(&FarmConfig, &TimeSeriesDataset) -> Result<f64>,
) -> Result<SimilarityRanking> {
    if pool.is_empty() {
        return Err(Error::EmptyRequest("source pool is empty".into()));
    }
    if k == 0 {
        return Err(Error::validation("k", "must be at least 1"));
    }
    if target_nwp.is_empty() {
        return Err(Error::EmptyRequest("target NWP series is empty".into()));
    }
    let configs: Vec<FarmConfig> = pool.iter().map(|(c, _)| c.clone()).collect();
    let kept = terrain_filter(&configs, target_terrain);
    let mut entries = Vec::with_capacity(kept.len());
    for (cfg, matched) in kept {
        let (_, ds) = pool
            .iter()
            .find(|(c, _)| c.farm_id == cfg.farm_id)
            .expect("filtered farm comes from the pool");
        if ds.is_empty() {
            return Err(Error::EmptyRequest(format!("dataset of `{}` is empty", cfg.farm_id)));
        }
        entries.push(RankingEntry {
            source_farm_id: cfg.farm_id.clone(),
            distance: distance(&cfg, ds)?,
            terrain_match: matched,
        });
    }
    entries.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.source_farm_id.cmp(&b.source_farm_id))
    });
    entries.truncate(k);
    Ok(SimilarityRanking {
        target_farm_id: target_nwp.farm_id.clone(),
        entries,
    })
}

/// Rank the pool by ws100 marginal distance to the target after the terrain
/// pre-filter. Ties break on farm id.
pub fn rank_sources(
    pool: &[(FarmConfig, TimeSeriesDataset)],
    target_nwp: &TimeSeriesDataset,
    target_terrain: Terrain,
    k: usize,
) -> Result<SimilarityRanking> {
    let target_ws = target_nwp.ws100();
    rank_by(pool, target_nwp, target_terrain, k, |_, ds| wasserstein1(&ds.ws100(), &target_ws))
}

/// As [`rank_sources`] with a chosen statistic. [`Similarity::PowerCurve`]
/// needs the target's configuration, which is known before operation.
pub fn rank_sources_by(
    pool: &[(FarmConfig, TimeSeriesDataset)],
    target: &FarmConfig,
    target_nwp: &TimeSeriesDataset,
    k: usize,
    similarity: Similarity,
) -> Result<SimilarityRanking> {
    match similarity {
        Similarity::WindSpeed => rank_sources(pool, target_nwp, target.terrain, k),
        Similarity::PowerCurve => rank_by(pool, target_nwp, target.terrain, k, |cfg, _| {
            curve_distance(cfg, target, target_nwp)
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

/// Permutation importance: the RMSE increase when one input column is
/// shuffled, averaged over [`PERMUTATION_REPEATS`] shuffles, sorted
/// descending. The clock encoding columns are ranked alongside the NWP
/// features.
pub fn rank_feature_influence(model: &DenseNetwork, data: &TimeSeriesDataset, seed: u64) -> Result<Vec<FeatureImportance>> {
    let (x, y) = data.labeled_xy();
    if x.is_empty() {
        return Err(Error::EmptyRequest("feature influence needs labeled records".into()));
    }
    if model.input_dim != INPUT_NAMES.len() {
        return Err(Error::validation(
            "model.input_dim",
            format!("expected {} inputs, got {}", INPUT_NAMES.len(), model.input_dim),
        ));
    }
    let base = util::rmse(&model.predict_many(&x)?, &y);
    let mut out = Vec::with_capacity(INPUT_NAMES.len());
    for (col, name) in INPUT_NAMES.iter().enumerate() {
        let mut rng = util::rng(seed, 0x700 + col as u64);
        let mut total = 0.0;
        for _ in 0..PERMUTATION_REPEATS {
            let mut column: Vec<f64> = x.iter().map(|r| r[col]).collect();
            column.shuffle(&mut rng);
            let permuted: Vec<Vec<f64>> = x
                .iter()
                .zip(&column)
                .map(|(r, v)| {
                    let mut r = r.clone();
                    r[col] = *v;
                    r
                })
                .collect();
            total += util::rmse(&model.predict_many(&permuted)?, &y) - base;
        }
        let mean = total / PERMUTATION_REPEATS as f64;
        out.push(FeatureImportance {
            feature: (*name).to_string(),
            importance: if mean < IMPORTANCE_NOISE_FLOOR { 0.0 } else { mean },
        });
    }
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.feature.cmp(&b.feature)));
    Ok(out)
}

// SPDX-License-Identifier: Apache-2.0

//! Scenario definitions and the synthetic world they describe: a pool of
//! labeled source farms and one target farm that starts operating at the
//! end of the pool's history.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::csge::CsgeParams;
use crate::data::{FarmConfig, Terrain, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::lifecycle::NoveltyParams;
use crate::nnet::TrainConfig;
use crate::preselect::Similarity;
use crate::synthdata::{
    default_start, generate_farm_config, generate_nwp_series_from, generate_power_series, validate_events, EventKind,
    LifecycleEvent, TRUTH_MODEL_ID,
};
use crate::transfer::ModelDims;
use crate::util;

pub const SCHEMA_VERSION: &str = "1";
/// Hours per simulated month.
pub const MONTH_HOURS: usize = 720;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Physical,
    Wp1Naive,
    Wp1Universal,
    Csge,
    SelfTrain,
    Mtl,
    Multicross,
    /// Regressor trained on the target's own labels only.
    TargetOnly,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Physical,
        Method::Wp1Naive,
        Method::Wp1Universal,
        Method::Csge,
        Method::SelfTrain,
        Method::Mtl,
        Method::Multicross,
        Method::TargetOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Physical => "physical",
            Method::Wp1Naive => "wp1_naive",
            Method::Wp1Universal => "wp1_universal",
            Method::Csge => "csge",
            Method::SelfTrain => "self_train",
            Method::Mtl => "mtl",
            Method::Multicross => "multicross",
            Method::TargetOnly => "target_only",
        }
    }

    /// Methods that reuse source farms.
    pub fn is_transfer(self) -> bool {
        !matches!(self, Method::Physical | Method::TargetOnly)
    }

    /// Methods that need target labels.
    pub fn needs_labels(self) -> bool {
        matches!(
            self,
            Method::Csge | Method::SelfTrain | Method::Mtl | Method::Multicross | Method::TargetOnly
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation("methods", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub terrain: Terrain,
    pub count: usize,
}

/// Tunables with desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub train: TrainConfig,
    pub dims: ModelDims,
    /// Hours of pool history and target NWP archive before operation starts.
    pub history_hours: usize,
    /// Sources kept after pre-selection.
    pub top_k: usize,
    /// Statistic ordering candidate sources.
    pub similarity: Similarity,
    /// Replicas behind pseudo-label confidence.
    pub replicas: usize,
    pub conf_threshold: f64,
    pub self_train_rounds: usize,
    /// Most recent archive hours offered to self-training as unlabeled data.
    pub unlabeled_hours: usize,
    pub code_dim: usize,
    pub lambda_consistency: f64,
    pub retrieval_k: usize,
    pub csge: CsgeParams,
    pub novelty: NoveltyParams,
    /// Labeled hours that open the little-data phase.
    pub little_data_hours: usize,
    /// Labeled hours that open the growing phase.
    pub growing_hours: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 60,
                batch_size: 32,
                learning_rate: 0.02,
                ..TrainConfig::default()
            },
            dims: ModelDims::compact(),
            history_hours: 8760,
            top_k: 3,
            similarity: Similarity::default(),
            replicas: 5,
            conf_threshold: crate::transfer::selftrain::DEFAULT_CONF_THRESHOLD,
            self_train_rounds: 2,
            unlabeled_hours: 2160,
            code_dim: 4,
            lambda_consistency: 1.0,
            retrieval_k: 5,
            csge: CsgeParams::default(),
            novelty: NoveltyParams::default(),
            little_data_hours: 168,
            growing_hours: 2160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: String,
    pub seed: u64,
    pub pool: Vec<PoolEntry>,
    pub target_terrain: Terrain,
    pub months: usize,
    pub nwp_models: Vec<String>,
    #[serde(default)]
    pub events: Vec<LifecycleEvent>,
    pub methods: Vec<Method>,
    /// When false the target's labels are never revealed for training; they
    /// are still used for evaluation.
    #[serde(default = "yes")]
    pub reveal_labels: bool,
    #[serde(default)]
    pub hyper: Hyper,
}

fn yes() -> bool {
    true
}

fn at(path: &str, err: Error) -> Error {
    match err {
        Error::Validation { path: inner, message } => Error::validation(format!("{path}.{inner}"), message),
        other => other,
    }
}

impl ScenarioConfig {
    /// The bundled default scenario: 12 months, five onshore sources and two
    /// NWP models, every method enabled.
    pub fn default_scenario() -> Self {
        Self {
            schema_version: SCHEMA_VERSION.into(),
            seed: 1,
            pool: vec![
                PoolEntry {
                    terrain: Terrain::Onshore,
                    count: 3,
                },
                PoolEntry {
                    terrain: Terrain::Farmland,
                    count: 2,
                },
            ],
            target_terrain: Terrain::Onshore,
            months: 12,
            nwp_models: vec!["nwpA".into(), "nwpB".into()],
            events: Vec::new(),
            methods: Method::ALL.to_vec(),
            reveal_labels: true,
            hyper: Hyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("expected \"{SCHEMA_VERSION}\", got \"{}\"", self.schema_version),
            ));
        }
        if self.pool.iter().map(|p| p.count).sum::<usize>() == 0 {
            return Err(Error::validation("pool", "pool must hold at least one farm"));
        }
        if self.methods.is_empty() {
            return Err(Error::validation("methods", "at least one method is required"));
        }
        if self.nwp_models.is_empty() {
            return Err(Error::validation("nwp_models", "at least one NWP model is required"));
        }
        for (i, m) in self.nwp_models.iter().enumerate() {
            if m.is_empty() || m == TRUTH_MODEL_ID {
                return Err(Error::validation(format!("nwp_models[{i}]"), "invalid model id"));
            }
            if self.nwp_models[..i].contains(m) {
                return Err(Error::validation(format!("nwp_models[{i}]"), "duplicate model id"));
            }
        }
        validate_events(&self.events)?;
        let h = &self.hyper;
        h.train.validate().map_err(|e| at("hyper.train", e))?;
        h.dims.validate().map_err(|e| at("hyper", e))?;
        h.csge.validate().map_err(|e| at("hyper.csge", e))?;
        h.novelty.validate().map_err(|e| at("hyper.novelty", e))?;
        let positive = [
            ("history_hours", h.history_hours),
            ("top_k", h.top_k),
            ("code_dim", h.code_dim),
            ("retrieval_k", h.retrieval_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("hyper.{name}"), "must be at least 1"));
            }
        }
        if h.replicas < 2 {
            return Err(Error::validation("hyper.replicas", "at least two replicas are required"));
        }
        if !(h.conf_threshold > 0.0 && h.conf_threshold <= 1.0) {
            return Err(Error::validation("hyper.conf_threshold", "must lie in (0, 1]"));
        }
        if !(h.lambda_consistency >= 0.0) {
            return Err(Error::validation("hyper.lambda_consistency", "must be non-negative"));
        }
        if h.code_dim >= crate::data::INPUT_DIM {
            return Err(Error::validation("hyper.code_dim", "must be smaller than the input dimension"));
        }
        if h.growing_hours < h.little_data_hours {
            return Err(Error::validation("hyper.growing_hours", "must not precede little_data_hours"));
        }
        Ok(())
    }

    /// Parse and validate; validation errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First hour of target operation.
    pub fn operation_start(&self) -> DateTime<Utc> {
        default_start() + Duration::hours(self.hyper.history_hours as i64)
    }

    pub fn has(&self, method: Method) -> bool {
        self.methods.contains(&method)
    }
}

/// One pool farm with labeled history under every scenario NWP model.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolFarm {
    pub config: FarmConfig,
    pub seed: u64,
    /// Keyed by NWP model id.
    pub history: BTreeMap<String, TimeSeriesDataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub pool: Vec<PoolFarm>,
    pub target: FarmConfig,
    pub target_seed: u64,
    /// Unlabeled target NWP archive before operation.
    pub archive: TimeSeriesDataset,
    /// Target operation with true power (revealed month by month).
    pub operation: TimeSeriesDataset,
    /// NWP model feeding each operation record.
    pub operation_nwp: Vec<String>,
    pub start: DateTime<Utc>,
}

/// NWP model active at `t`: the latest declared change at or before `t`.
pub fn active_nwp<'a>(primary: &'a str, events: &'a [LifecycleEvent], t: DateTime<Utc>) -> &'a str {
    events
        .iter()
        .filter(|e| e.start <= t)
        .filter_map(|e| match &e.kind {
            EventKind::NwpModelChange { nwp_model_id } => Some((e.start, nwp_model_id.as_str())),
            _ => None,
        })
        .max_by_key(|(s, _)| *s)
        .map_or(primary, |(_, m)| m)
}

/// Labeled history of `config` under `nwp` for `hours` from `start`.
pub fn farm_history(
    config: &FarmConfig,
    start: DateTime<Utc>,
    hours: usize,
    nwp: &str,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    let truth = generate_nwp_series_from(config, start, hours, TRUTH_MODEL_ID, seed)?;
    let power = generate_power_series(config, &truth, &[], seed)?;
    Ok(generate_nwp_series_from(config, start, hours, nwp, seed)?.with_power_from(&power))
}

/// Generate every dataset of a scenario.
pub fn build_world(scenario: &ScenarioConfig) -> Result<World> {
    scenario.validate()?;
    let h = &scenario.hyper;
    let start = default_start();
    let t0 = scenario.operation_start();
    let mut pool = Vec::new();
    let mut index = 0u64;
    for entry in &scenario.pool {
        for _ in 0..entry.count {
            let seed = util::derive_seed(scenario.seed, 0x1000 + index);
            index += 1;
            let config = generate_farm_config(seed, entry.terrain);
            let history = scenario
                .nwp_models
                .iter()
                .map(|m| Ok((m.clone(), farm_history(&config, start, h.history_hours, m, seed)?)))
                .collect::<Result<_>>()?;
            pool.push(PoolFarm { config, seed, history });
        }
    }
    let target_seed = util::derive_seed(scenario.seed, 0x2000);
    let mut target = generate_farm_config(target_seed, scenario.target_terrain);
    target.farm_id = format!("target-{}", target.farm_id);
    let total = h.history_hours + scenario.months * MONTH_HOURS;
    let truth = generate_nwp_series_from(&target, start, total, TRUTH_MODEL_ID, target_seed)?;
    let power = generate_power_series(&target, &truth, &scenario.events, target_seed)?;
    let primary = scenario.nwp_models[0].as_str();
    let mut models: Vec<&str> = (0..total)
        .map(|i| active_nwp(primary, &scenario.events, truth.timestamps[i]))
        .collect();
    let mut series: BTreeMap<&str, TimeSeriesDataset> = BTreeMap::new();
    let mut distinct = models.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for m in distinct {
        series.insert(m, generate_nwp_series_from(&target, start, total, m, target_seed)?);
    }
    let mut stitched = series[primary].clone();
    for (i, m) in models.iter().enumerate() {
        stitched.features[i] = series[m].features[i];
    }
    stitched.power = power.power;
    let archive_idx: Vec<usize> = (0..h.history_hours).collect();
    let op_idx: Vec<usize> = (h.history_hours..total).collect();
    let archive = stitched.filter_indices(&archive_idx).without_power();
    let operation = stitched.filter_indices(&op_idx);
    let operation_nwp = models.split_off(h.history_hours).into_iter().map(String::from).collect();
    Ok(World {
        pool,
        target,
        target_seed,
        archive,
        operation,
        operation_nwp,
        start: t0,
    })
}

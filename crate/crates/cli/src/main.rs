// SPDX-License-Identifier: Apache-2.0

//! `windtl` command-line driver: generate farm pools, run lifecycle
//! scenarios and summarize their reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use windtl::data::{FarmConfig, Terrain};
use windtl::lifecycle::{run_lifecycle, LifecycleReport};
use windtl::scenario::{farm_history, Method, PoolEntry, ScenarioConfig, MONTH_HOURS, SCHEMA_VERSION};
use windtl::synthdata::{default_start, generate_farm_config};
use windtl::{util, Error};

const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.json");

#[derive(Parser)]
#[command(name = "windtl", version, about = "Wind power transfer learning across a farm's lifecycle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled farm pool as CSV files plus a manifest.
    Gen {
        /// Comma-separated `terrain:count` entries, e.g. `offshore:3,forest:2`.
        #[arg(long)]
        pool: String,
        #[arg(long, default_value_t = 12)]
        months: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "nwpA")]
        nwp: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a lifecycle scenario and write `report.json` and `metrics.csv`.
    Run {
        /// Scenario JSON; the bundled default when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        months: Option<usize>,
        /// Comma-separated method names.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a report per method.
    Eval {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Print the bundled default scenario.
    Scenario,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_pool(spec: &str) -> Result<Vec<PoolEntry>, Failure> {
    let entries: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if entries.is_empty() {
        return Err(Failure::Usage("--pool needs at least one terrain:count entry".into()));
    }
    entries
        .into_iter()
        .map(|e| {
            let (t, c) = e
                .split_once(':')
                .ok_or_else(|| Failure::Usage(format!("pool entry `{e}` is not terrain:count")))?;
            let terrain: Terrain = t.parse().map_err(|err: Error| Failure::Usage(err.to_string()))?;
            let count = c
                .parse()
                .map_err(|_| Failure::Usage(format!("pool entry `{e}` has a bad count")))?;
            Ok(PoolEntry { terrain, count })
        })
        .collect()
}

#[derive(Serialize)]
struct ManifestFarm {
    file: String,
    records: usize,
    seed: u64,
    config: FarmConfig,
}

#[derive(Serialize)]
struct Manifest {
    schema_version: String,
    seed: u64,
    months: usize,
    nwp_model_id: String,
    start: String,
    farms: Vec<ManifestFarm>,
}

fn write(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_gen(pool: &str, months: usize, seed: u64, nwp: &str, out: &Path) -> Result<(), Failure> {
    let entries = parse_pool(pool)?;
    if entries.iter().map(|e| e.count).sum::<usize>() == 0 {
        return Err(Failure::Usage("--pool must hold at least one farm".into()));
    }
    if months == 0 {
        return Err(Failure::Usage("--months must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let hours = months * MONTH_HOURS;
    let mut farms = Vec::new();
    let mut index = 0u64;
    for entry in &entries {
        for _ in 0..entry.count {
            let farm_seed = util::derive_seed(seed, 0x1000 + index);
            index += 1;
            let config = generate_farm_config(farm_seed, entry.terrain);
            let ds = farm_history(&config, default_start(), hours, nwp, farm_seed)?;
            let file = format!("{}.csv", config.farm_id);
            let mut buf = Vec::new();
            ds.write_csv(&mut buf, None)?;
            write(&out.join(&file), &buf)?;
            farms.push(ManifestFarm {
                file,
                records: ds.len(),
                seed: farm_seed,
                config,
            });
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION.into(),
        seed,
        months,
        nwp_model_id: nwp.into(),
        start: default_start().to_rfc3339(),
        farms,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(&out.join("manifest.json"), json.as_bytes())?;
    log::info!("wrote {} farms to {}", manifest.farms.len(), out.display());
    Ok(())
}

fn cmd_run(
    scenario: Option<&Path>,
    seed: Option<u64>,
    months: Option<usize>,
    methods: Option<&str>,
    out: &Path,
) -> Result<(), Failure> {
    let text = match scenario {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => DEFAULT_SCENARIO.to_string(),
    };
    let mut cfg = ScenarioConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = months {
        cfg.months = m;
    }
    if let Some(list) = methods {
        cfg.methods = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse::<Method>)
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    let started = std::time::Instant::now();
    let report = run_lifecycle(&cfg)?;
    log::info!("lifecycle finished in {:.1?}", started.elapsed());
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("report.json"), report.to_json()?.as_bytes())?;
    write(&out.join("metrics.csv"), report.metrics_csv()?.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    months: usize,
    rmse_median: f64,
    rmse_iqr: f64,
    skill_median: f64,
    skill_iqr: f64,
}

fn summarize(report: &LifecycleReport) -> Vec<SummaryRow> {
    let mut by: BTreeMap<Method, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for m in &report.metrics {
        let e = by.entry(m.method).or_default();
        e.0.push(m.rmse);
        e.1.push(m.skill);
    }
    let iqr = |v: &[f64]| util::percentile(v, 75.0) - util::percentile(v, 25.0);
    by.into_iter()
        .map(|(method, (rmse, skill))| SummaryRow {
            method: method.to_string(),
            months: rmse.len(),
            rmse_median: util::median(&rmse),
            rmse_iqr: iqr(&rmse),
            skill_median: util::median(&skill),
            skill_iqr: iqr(&skill),
        })
        .collect()
}

fn cmd_eval(report: &Path, format: Format) -> Result<(), Failure> {
    let text = fs::read_to_string(report).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", report.display())))?;
    let report = LifecycleReport::from_json(&text).map_err(|e| Failure::Usage(format!("bad report: {e}")))?;
    let rows = summarize(&report);
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&rows).map_err(|e| Failure::Runtime(e.to_string()))?);
        }
        Format::Csv => {
            println!("method,months,rmse_median,rmse_iqr,skill_median,skill_iqr");
            for r in &rows {
                println!(
                    "{},{},{},{},{},{}",
                    r.method, r.months, r.rmse_median, r.rmse_iqr, r.skill_median, r.skill_iqr
                );
            }
        }
        Format::Table => {
            println!(
                "{:<14} {:>6} {:>12} {:>10} {:>12} {:>10}",
                "method", "months", "rmse_median", "rmse_iqr", "skill_median", "skill_iqr"
            );
            for r in &rows {
                println!(
                    "{:<14} {:>6} {:>12.6} {:>10.6} {:>12.6} {:>10.6}",
                    r.method, r.months, r.rmse_median, r.rmse_iqr, r.skill_median, r.skill_iqr
                );
            }
        }
    }
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("WINDTL_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("cannot size the worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring WINDTL_THREADS={v}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Gen {
            pool,
            months,
            seed,
            nwp,
            out,
        } => cmd_gen(pool, *months, *seed, nwp, out),
        Command::Run {
            scenario,
            seed,
            months,
            methods,
            out,
        } => cmd_run(scenario.as_deref(), *seed, *months, methods.as_deref(), out),
        Command::Eval { report, format } => cmd_eval(report, *format),
        Command::Scenario => {
            print!("{DEFAULT_SCENARIO}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

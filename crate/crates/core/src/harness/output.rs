//! On-disk layout of an ensemble directory and a sweep.
//!
//! ```text
//! config.toml          canonical copy of the producing configuration
//! summary.json         schema version, hash, bounds, outcome counts, timing
//! finals_agents.csv    run_index, agent_index, coord_0..coord_{n-1}
//! finals_quorum.csv    run_index, agent_index (always 0), coord_0..
//! diagnostics.csv      run_index, step, sync_measure, eps_norm, loss_quorum, loss_mean
//! ```
//!
//! Floats in CSV files carry 17 significant digits. Diverged runs are absent
//! from the finals and diagnostics files and listed in the summary.

use super::bounds::BoundRow;
use super::config::SimulationConfig;
use super::run::{Ensemble, Outcome, PostBurnIn, SweepAxis};
use super::HarnessError;
use crate::analysis::TrajectoryDiagnostics;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Bumped whenever a file's columns or the summary's fields change.
pub const SCHEMA_VERSION: u32 = 1;

pub const DIAGNOSTICS_COLUMNS: [&str; 6] =
    ["run_index", "step", "sync_measure", "eps_norm", "loss_quorum", "loss_mean"];

pub const SWEEP_COLUMNS: [&str; 10] = [
    "axis",
    "value",
    "runs",
    "diverged",
    "sync_measure",
    "eps_norm",
    "loss_quorum",
    "loss_mean",
    "sync_bound",
    "eps_bound",
];

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergedRun {
    pub run_index: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config_hash: String,
    pub runs: usize,
    pub diverged: usize,
    pub converged: usize,
    pub diverged_runs: Vec<DivergedRun>,
    pub post_burn_in: BTreeMap<String, Option<f64>>,
    pub bounds: Vec<SummaryBound>,
    /// Wall-clock seconds; only written on request so that outputs stay
    /// byte-identical across repeated runs.
    pub timing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBound {
    pub name: String,
    pub value: Option<f64>,
    pub note: Option<String>,
}

fn post_burn_in_map(pb: &PostBurnIn) -> BTreeMap<String, Option<f64>> {
    BTreeMap::from([
        ("sync_measure".to_string(), pb.sync_measure),
        ("eps_norm".to_string(), pb.eps_norm),
        ("loss_quorum".to_string(), pb.loss_quorum),
        ("loss_mean".to_string(), pb.loss_mean),
    ])
}

pub fn summary(
    config: &SimulationConfig,
    ensemble: &Ensemble,
    bounds: &[BoundRow],
    timing: Option<f64>,
) -> Summary {
    let s = &ensemble.summary;
    Summary {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash(),
        runs: s.runs,
        diverged: s.diverged,
        converged: s.converged,
        diverged_runs: ensemble
            .records
            .iter()
            .filter_map(|r| match r.outcome {
                Outcome::Diverged(step) => Some(DivergedRun { run_index: r.run_index, step }),
                _ => None,
            })
            .collect(),
        post_burn_in: post_burn_in_map(&s.post_burn_in),
        bounds: bounds
            .iter()
            .map(|b| SummaryBound { name: b.name.clone(), value: b.value, note: b.note.clone() })
            .collect(),
        timing,
    }
}

fn coord_header(prefix: &[&str], n: usize) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((0..n).map(|c| format!("coord_{c}"))).collect()
}

fn write_finals<'a>(
    path: &Path,
    n: usize,
    rows: impl Iterator<Item = (u64, usize, &'a [f64])>,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(coord_header(&["run_index", "agent_index"], n))?;
    for (run, agent, x) in rows {
        let mut rec = vec![run.to_string(), agent.to_string()];
        rec.extend(x.iter().map(|&v| fmt_float(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the ensemble directory, creating it if needed.
pub fn write_ensemble(
    dir: &Path,
    config: &SimulationConfig,
    ensemble: &Ensemble,
    bounds: &[BoundRow],
    timing: Option<f64>,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    let json = serde_json::to_string_pretty(&summary(config, ensemble, bounds, timing))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    let n = config.dim();
    let s = &ensemble.summary;
    write_finals(
        &dir.join("finals_agents.csv"),
        n,
        s.agent_finals.iter().map(|(r, i, x)| (*r, *i, x.as_slice())),
    )?;
    write_finals(&dir.join("finals_quorum.csv"), n, s.quorum_finals.iter().map(|(r, x)| (*r, 0, x.as_slice())))?;
    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    w.write_record(DIAGNOSTICS_COLUMNS)?;
    for r in ensemble.records.iter().filter(|r| !r.diverged()) {
        let d = &r.diagnostics;
        for j in 0..d.len() {
            w.write_record([
                r.run_index.to_string(),
                d.step[j].to_string(),
                fmt_float(d.sync_measure[j]),
                fmt_float(d.eps_norm[j]),
                fmt_float(d.loss_quorum[j]),
                fmt_float(d.loss_mean[j]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bound_value(bounds: &[BoundRow], name: &str) -> Option<f64> {
    bounds.iter().find(|b| b.name == name).and_then(|b| b.value)
}

/// Writes `sweep.csv`, one row per value.
pub fn write_sweep_csv(
    path: &Path,
    axis: SweepAxis,
    rows: &[(f64, &Ensemble, &[BoundRow])],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for (value, e, bounds) in rows {
        let s = &e.summary;
        let pb = &s.post_burn_in;
        w.write_record([
            axis.name().to_string(),
            fmt_float(*value),
            s.runs.to_string(),
            s.diverged.to_string(),
            fmt_opt(pb.sync_measure),
            fmt_opt(pb.eps_norm),
            fmt_opt(pb.loss_quorum),
            fmt_opt(pb.loss_mean),
            fmt_opt(bound_value(bounds, "sync_bound")),
            fmt_opt(bound_value(bounds, "eps_bound")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run diagnostics from `diagnostics.csv`, ordered by run index.
pub fn read_diagnostics(path: &Path) -> Result<Vec<TrajectoryDiagnostics>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    if reader.headers()?.iter().ne(DIAGNOSTICS_COLUMNS) {
        return Err(HarnessError::Config(format!("{}: unexpected columns", path.display())));
    }
    let mut runs: BTreeMap<u64, TrajectoryDiagnostics> = BTreeMap::new();
    for rec in reader.deserialize() {
        let (run, step, sync, eps, lq, lm): (u64, u64, f64, f64, f64, f64) = rec?;
        let d = runs.entry(run).or_default();
        d.step.push(step);
        d.sync_measure.push(sync);
        d.eps_norm.push(eps);
        d.loss_quorum.push(lq);
        d.loss_mean.push(lm);
    }
    Ok(runs.into_values().collect())
}

/// Coordinates from a finals file, one row per line.
pub fn read_finals(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let coords = rec
            .iter()
            .skip(2)
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        out.push(coords);
    }
    Ok(out)
}

/// One named column of a headed CSV file.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let idx = reader
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| HarnessError::Config(format!("{}: no column {column}", path.display())))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let v = rec
            .get(idx)
            .unwrap_or_default()
            .parse::<f64>()
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        out.push(v);
    }
    Ok(out)
}

//! Pairs post-burn-in ensemble statistics with their theoretical bounds.

use super::{AnalysisError, TrajectoryDiagnostics};
use crate::bounds::{eps_bound, qsgd_conv_bound, sync_bound, BoundInputs};
use serde::Serialize;

/// Fraction of each trajectory discarded as transient.
pub const DEFAULT_BURN_IN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub quantity: String,
    pub empirical: f64,
    /// `None` when the bound's precondition fails.
    pub bound: Option<f64>,
    /// `bound − empirical`.
    pub margin: Option<f64>,
    pub pass: Option<bool>,
    /// Reason a bound is not applicable.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub burn_in: f64,
    pub runs: usize,
    pub rows: Vec<ReportRow>,
}

/// Mean of `series` after discarding the first `burn_in` fraction of entries;
/// `None` if nothing remains.
pub fn post_burn_in_mean(series: &[f64], burn_in: f64) -> Option<f64> {
    let skip = (burn_in.clamp(0.0, 1.0) * series.len() as f64).floor() as usize;
    let tail = &series[skip.min(series.len())..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Average over runs of each run's post-burn-in mean.
fn ensemble_mean<'a>(series: impl Iterator<Item = &'a [f64]>, burn_in: f64) -> Option<f64> {
    let means: Vec<f64> = series.filter_map(|s| post_burn_in_mean(s, burn_in)).collect();
    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
}

fn row(quantity: &str, empirical: f64, bound: Result<f64, String>) -> ReportRow {
    match bound {
        Ok(b) => ReportRow {
            quantity: quantity.into(),
            empirical,
            bound: Some(b),
            margin: Some(b - empirical),
            pass: Some(empirical <= b),
            note: None,
        },
        Err(reason) => ReportRow {
            quantity: quantity.into(),
            empirical,
            bound: None,
            margin: None,
            pass: None,
            note: Some(format!("not applicable: {reason}")),
        },
    }
}

/// Compares mean synchronization and distortion with their bounds, and, when
/// `terminal_distances` (per-run `‖x• − x*‖` at the end) are given, their mean
/// with the QSGD convergence bound.
pub fn bound_report(
    diags: &[TrajectoryDiagnostics],
    inputs: &BoundInputs,
    burn_in: f64,
    terminal_distances: Option<&[f64]>,
) -> Result<BoundReport, AnalysisError> {
    if diags.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut rows = Vec::new();
    if let Some(sync) = ensemble_mean(diags.iter().map(|d| d.sync_measure.as_slice()), burn_in) {
        rows.push(row("sync_measure", sync, sync_bound(inputs).map_err(|e| e.to_string())));
    }
    if let Some(eps) = ensemble_mean(diags.iter().map(|d| d.eps_norm.as_slice()), burn_in) {
        let rate = inputs.k - inputs.lambda_bar;
        rows.push(row("eps_norm", eps, eps_bound(inputs, rate).map_err(|e| e.to_string())));
    }
    if let Some(dist) = terminal_distances.filter(|d| !d.is_empty()) {
        let mean = dist.iter().sum::<f64>() / dist.len() as f64;
        rows.push(row("dist_to_opt", mean, qsgd_conv_bound(inputs).map_err(|e| e.to_string())));
    }
    Ok(BoundReport { burn_in, runs: diags.len(), rows })
}

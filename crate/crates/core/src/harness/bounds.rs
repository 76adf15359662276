//! Bound constants derived from a configuration and the table printed by the
//! `bounds` subcommand.

use super::config::{Built, InitSpec, SimulationConfig};
use super::HarnessError;
use crate::bounds::{easgd_rate, eps_bound, qsgd_conv_bound, sync_bound, sync_bound_multi_lr, BoundInputs};
use crate::objectives::{estimate_curvature, CurvatureInfo};
use serde::Serialize;

/// Sample budget and seed of the numerical curvature estimate.
const CURVATURE_SAMPLES: usize = 512;
const CURVATURE_SEED: u64 = 0;
/// Half-width of the estimation box around a point initialization.
const POINT_BOX_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub name: String,
    pub value: Option<f64>,
    pub note: Option<String>,
}

/// Closed-form curvature when the objective has it, otherwise a numerical
/// estimate over the initialization box.
pub fn curvature(config: &SimulationConfig, built: &Built) -> Result<CurvatureInfo, HarnessError> {
    if let Some(info) = built.objective.curvature() {
        return Ok(info);
    }
    let bbox: Vec<(f64, f64)> = match &config.init {
        InitSpec::Uniform { lo, hi } => vec![(*lo, *hi); built.objective.dim()],
        InitSpec::Point { x } => x.iter().map(|v| (v - POINT_BOX_RADIUS, v + POINT_BOX_RADIUS)).collect(),
    };
    Ok(estimate_curvature(built.objective.as_ref(), &bbox, CURVATURE_SAMPLES, CURVATURE_SEED)?)
}

/// Inputs for the closed-form bounds. With per-agent rates `eta` is the
/// largest one; a negative curvature constant is raised to zero.
pub fn bound_inputs(config: &SimulationConfig, built: &Built) -> Result<BoundInputs, HarnessError> {
    let info = curvature(config, built)?;
    let n = built.objective.dim();
    Ok(BoundInputs {
        p: config.agents,
        n,
        b: config.batch,
        eta: built.etas.iter().copied().fold(0.0, f64::max),
        c: built.raw_noise.trace(n).unwrap_or(f64::NAN),
        q: info.q_bound.unwrap_or(0.0).max(0.0),
        k: config.coupling(),
        lambda_bar: info.lambda_bar.max(0.0),
        lambda_strong: info.lambda_strong.unwrap_or(0.0),
        ..BoundInputs::default()
    })
}

fn row(name: &str, r: Result<f64, crate::bounds::BoundError>) -> BoundRow {
    match r {
        Ok(v) => BoundRow { name: name.into(), value: Some(v), note: None },
        Err(e) => BoundRow { name: name.into(), value: None, note: Some(e.to_string()) },
    }
}

pub fn bound_table(config: &SimulationConfig, built: &Built) -> Result<Vec<BoundRow>, HarnessError> {
    let inputs = bound_inputs(config, built)?;
    let mut rows = vec![
        row("sync_bound", sync_bound(&inputs)),
        row("eps_bound", eps_bound(&inputs, inputs.k - inputs.lambda_bar)),
        row("qsgd_conv_bound", qsgd_conv_bound(&inputs)),
        row("easgd_rate", easgd_rate(inputs.lambda_strong, inputs.k, inputs.p)),
    ];
    if built.etas.iter().any(|&e| e != built.etas[0]) {
        rows.insert(1, row("sync_bound_multi_lr", sync_bound_multi_lr(&inputs, &built.etas)));
    }
    Ok(rows)
}

/// Fixed-width text rendering of the table.
pub fn render_table(inputs: &BoundInputs, rows: &[BoundRow]) -> String {
    let mut out = format!(
        "p = {}, n = {}, b = {}, eta = {}, C = {}, Q = {}, k = {}, lambda_bar = {}, lambda = {}\n",
        inputs.p, inputs.n, inputs.b, inputs.eta, inputs.c, inputs.q, inputs.k, inputs.lambda_bar,
        inputs.lambda_strong
    );
    for r in rows {
        let value = match (r.value, &r.note) {
            (Some(v), _) => format!("{v:.6e}"),
            (None, Some(note)) => format!("n/a ({note})"),
            (None, None) => "n/a".into(),
        };
        out.push_str(&format!("{:<20} {value}\n", r.name));
    }
    out
}

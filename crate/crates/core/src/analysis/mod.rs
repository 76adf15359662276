//! Estimators linking simulation output to the bounds: synchronization
//! measure, gradient distortion, smoothed loss, density estimates, iterate
//! averaging and Ornstein–Uhlenbeck covariances.

mod kde;
mod ou;
mod report;

pub use kde::{kde, kde_at, kde_marginals, silverman_bandwidth, DensityEstimate, KDE_GRID_POINTS};
pub use ou::{ou_asymptotic_avg_variance, ou_stationary_variance};
pub use report::{bound_report, post_burn_in_mean, BoundReport, ReportRow, DEFAULT_BURN_IN};

use crate::dynamics::{center_of_mass, EnsembleState};
use crate::objectives::Objective;
use crate::stochastic::{sample_noise_into, NoiseModel, StreamKey};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("input is empty")]
    Empty,
    #[error("inputs are misaligned: {0}")]
    Misaligned(String),
    #[error("matrix is singular or ill-conditioned")]
    Singular,
    #[error("drift matrix is not stable")]
    NotStable,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise sampling failed: {0}")]
    Noise(String),
}

/// `Σᵢ‖xⁱ − x•‖²`.
pub fn sync_measure(positions: ArrayView2<f64>) -> f64 {
    let com = center_of_mass(positions);
    positions
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&com).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum()
}

/// `∇f(x•) − (1/p)Σᵢ∇f(xⁱ)`.
pub fn epsilon_distortion(obj: &dyn Objective, positions: ArrayView2<f64>) -> Vec<f64> {
    let p = positions.nrows() as f64;
    let com = center_of_mass(positions);
    let mut eps = obj.gradient_vec(&com);
    let mut g = vec![0.0; com.len()];
    let mut mean = vec![0.0; com.len()];
    for row in positions.rows() {
        let x = row.to_vec();
        obj.gradient(&x, &mut g);
        for (m, gi) in mean.iter_mut().zip(&g) {
            *m += gi;
        }
    }
    for (e, m) in eps.iter_mut().zip(&mean) {
        *e -= m / p;
    }
    eps
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Monte Carlo estimate of `E_ζ[f(x − ηζ)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothedLoss {
    pub mean: f64,
    pub std_error: f64,
}

/// Draw `i` uses `key.with_draw(i)`; reusing a key across points gives common
/// random numbers, which keeps grids of estimates smooth.
pub fn smoothed_loss(
    obj: &dyn Objective,
    noise: &NoiseModel,
    eta: f64,
    x: &[f64],
    n_samples: usize,
    key: StreamKey,
) -> Result<SmoothedLoss, AnalysisError> {
    if n_samples == 0 {
        return Err(AnalysisError::TooFewSamples { need: 1, got: 0 });
    }
    if noise.is_none() || eta == 0.0 {
        return Ok(SmoothedLoss { mean: obj.value(x), std_error: 0.0 });
    }
    let mut zeta = vec![0.0; x.len()];
    let mut probe = vec![0.0; x.len()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n_samples {
        sample_noise_into(noise, x, key.with_draw(i as u32), &mut zeta)
            .map_err(|e| AnalysisError::Noise(e.to_string()))?;
        for c in 0..x.len() {
            probe[c] = x[c] - eta * zeta[c];
        }
        let v = obj.value(&probe);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let std_error = if n_samples > 1 {
        ((sum_sq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(SmoothedLoss { mean, std_error })
}

/// Prefix means `z_T = (1/T) Σ_{t≤T} x•_t`.
pub fn iterate_average(trajectory: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let first = trajectory.first().ok_or(AnalysisError::Empty)?;
    let mut sum = vec![0.0; first.len()];
    let mut out = Vec::with_capacity(trajectory.len());
    for (t, x) in trajectory.iter().enumerate() {
        if x.len() != sum.len() {
            return Err(AnalysisError::Misaligned(format!("entry {t} has length {}", x.len())));
        }
        for (s, xi) in sum.iter_mut().zip(x) {
            *s += xi;
        }
        out.push(sum.iter().map(|s| s / (t + 1) as f64).collect());
    }
    Ok(out)
}

/// Aggregate noise `√(b/p)·Σᵢζⁱ`, the normalization under which the mean
/// update carries `−(η/√(bp))·ζ`.
pub fn aggregate_noise(zeta: &Array2<f64>, batch: f64) -> Vec<f64> {
    let p = zeta.nrows() as f64;
    let scale = (batch / p).sqrt();
    zeta.sum_axis(ndarray::Axis(0)).iter().map(|s| scale * s).collect()
}

/// Residuals `‖x•_{t+1} − (y•_t + ηε_t − (η/√(bp))ζ_t)‖` with
/// `y•_t = x•_t − η∇f(x•_t)`. `x_traj` has one more entry than the other two.
pub fn auxiliary_y_sequence(
    x_traj: &[Vec<f64>],
    noise_traj: &[Vec<f64>],
    eps_traj: &[Vec<f64>],
    obj: &dyn Objective,
    eta: f64,
    batch: f64,
    p: usize,
) -> Result<Vec<f64>, AnalysisError> {
    let steps = noise_traj.len();
    if x_traj.len() != steps + 1 || eps_traj.len() != steps {
        return Err(AnalysisError::Misaligned(format!(
            "{} positions, {} noise records, {} distortions",
            x_traj.len(),
            steps,
            eps_traj.len()
        )));
    }
    let noise_scale = eta / (batch * p as f64).sqrt();
    let mut residuals = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = &x_traj[t];
        let g = obj.gradient_vec(x);
        let r: Vec<f64> = (0..x.len())
            .map(|c| {
                let y = x[c] - eta * g[c];
                x_traj[t + 1][c] - (y + eta * eps_traj[t][c] - noise_scale * noise_traj[t][c])
            })
            .collect();
        residuals.push(norm(&r));
    }
    Ok(residuals)
}

/// Recorded diagnostics of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrajectoryDiagnostics {
    pub step: Vec<u64>,
    pub sync_measure: Vec<f64>,
    pub eps_norm: Vec<f64>,
    pub loss_quorum: Vec<f64>,
    pub loss_mean: Vec<f64>,
}

impl TrajectoryDiagnostics {
    pub fn len(&self) -> usize {
        self.step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_empty()
    }

    /// Appends one record. The quorum loss is taken at `x̃` (or the reporting
    /// average) when present, otherwise at `x•`.
    pub fn record(&mut self, obj: &dyn Objective, state: &EnsembleState) {
        let view = state.positions.view();
        let quorum = state.quorum.clone().unwrap_or_else(|| state.center_of_mass());
        let loss_mean = (0..state.agents()).map(|i| obj.value(state.agent(i))).sum::<f64>()
            / state.agents() as f64;
        self.step.push(state.step);
        self.sync_measure.push(sync_measure(view));
        self.eps_norm.push(norm(&epsilon_distortion(obj, view)));
        self.loss_quorum.push(obj.value(&quorum));
        self.loss_mean.push(loss_mean);
    }

    /// Keeps records with `step < limit`.
    pub fn truncate_before(&mut self, limit: u64) {
        let keep = self.step.iter().take_while(|&&s| s < limit).count();
        self.step.truncate(keep);
        self.sync_measure.truncate(keep);
        self.eps_norm.truncate(keep);
        self.loss_quorum.truncate(keep);
        self.loss_mean.truncate(keep);
    }
}

/// Loss on a 2-D slice through `base`, varying coordinates `axes.0` over `xs`
/// and `axes.1` over `ys`. Rows follow `ys`.
pub fn loss_cross_section(
    obj: &dyn Objective,
    base: &[f64],
    axes: (usize, usize),
    xs: &[f64],
    ys: &[f64],
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n = obj.dim();
    if base.len() != n || axes.0 >= n || axes.1 >= n || axes.0 == axes.1 {
        return Err(AnalysisError::Dimension(format!("axes {axes:?} in dimension {n}")));
    }
    let mut probe = base.to_vec();
    Ok(ys
        .iter()
        .map(|&y| {
            xs.iter()
                .map(|&x| {
                    probe[axes.0] = x;
                    probe[axes.1] = y;
                    obj.value(&probe)
                })
                .collect()
        })
        .collect())
}

/// Coordinate value held fixed off the displayed axes by default.
pub const DEFAULT_CROSS_SECTION_FILL: f64 = -1.2;

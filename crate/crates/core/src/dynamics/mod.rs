//! One-step update rules acting on an [`EnsembleState`].
//!
//! Every stepper is Jacobi-style: all agents read the pre-step center of mass
//! or quorum variable. Each `step_*` function draws its noise from
//! counter-based streams keyed by `(seed, agent, state.step)`; the matching
//! `apply_*` function takes the noise matrix explicitly so callers can record
//! or replay it.

mod schedule;
mod sde;

pub use schedule::{
    lr_schedule_step, wta_gains, CouplingSchedule, Gains, LrScheduleState, WtaSpike,
    LR_DECAY_FACTORS, LR_PATIENCE, LR_THRESHOLD,
};
pub use sde::{euler_maruyama_step, DriftKind, SdeParams};

use crate::objectives::Objective;
use crate::stochastic::{derive_stream, sample_noise_into, NoiseError, NoiseModel};
use ndarray::{Array2, ArrayView2};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// Weight of the newest center of mass in the reporting average.
pub const EMA_WEIGHT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {} after step {step}", agent_label(*.agent))]
    Divergence { agent: Option<usize>, step: u64 },
    #[error("stepper requires velocities")]
    MissingVelocities,
    #[error("stepper does not use velocities")]
    UnexpectedVelocities,
    #[error("stepper requires a quorum variable")]
    MissingQuorum,
    #[error("noise matrix is {got:?}, expected {want:?}")]
    NoiseShape { got: (usize, usize), want: (usize, usize) },
    #[error("scores are empty or do not match the agent count")]
    BadScores,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

fn agent_label(agent: Option<usize>) -> String {
    match agent {
        Some(i) => format!("agent {i}"),
        None => "quorum variable".to_string(),
    }
}

/// Positions (rows are agents), optional velocities and quorum variable,
/// per-agent learning rates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub positions: Array2<f64>,
    pub velocities: Option<Array2<f64>>,
    pub quorum: Option<Vec<f64>>,
    pub etas: Vec<f64>,
    pub step: u64,
}

impl EnsembleState {
    pub fn new(positions: Array2<f64>, etas: Vec<f64>) -> Result<Self, DynamicsError> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(DynamicsError::BadParameter("empty ensemble".into()));
        }
        if etas.len() != positions.nrows() {
            return Err(DynamicsError::BadParameter(format!(
                "{} learning rates for {} agents",
                etas.len(),
                positions.nrows()
            )));
        }
        if etas.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(DynamicsError::BadParameter("learning rates must be finite and ≥ 0".into()));
        }
        let positions = positions.as_standard_layout().into_owned();
        Ok(Self { positions, velocities: None, quorum: None, etas, step: 0 })
    }

    /// All agents share one learning rate.
    pub fn uniform(positions: Array2<f64>, eta: f64) -> Result<Self, DynamicsError> {
        let p = positions.nrows();
        Self::new(positions, vec![eta; p])
    }

    /// Adds zero velocities.
    pub fn with_velocities(mut self) -> Self {
        self.velocities = Some(Array2::zeros(self.positions.raw_dim()));
        self
    }

    pub fn with_quorum(mut self, quorum: Vec<f64>) -> Self {
        self.quorum = Some(quorum);
        self
    }

    /// Quorum initialized at the current center of mass.
    pub fn with_quorum_at_mean(self) -> Self {
        let q = center_of_mass(self.positions.view());
        self.with_quorum(q)
    }

    pub fn agents(&self) -> usize {
        self.positions.nrows()
    }

    pub fn dim(&self) -> usize {
        self.positions.ncols()
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        row(&self.positions, i)
    }

    pub fn center_of_mass(&self) -> Vec<f64> {
        center_of_mass(self.positions.view())
    }
}

/// Column-wise mean of the rows.
pub fn center_of_mass(positions: ArrayView2<f64>) -> Vec<f64> {
    let p = positions.nrows() as f64;
    positions.sum_axis(ndarray::Axis(0)).iter().map(|s| s / p).collect()
}

fn row(m: &Array2<f64>, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("ensemble matrices are kept in standard layout")
}

/// Draws one `ζ` per agent for the state's current step.
pub fn draw_noise(
    state: &EnsembleState,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Array2<f64>, DynamicsError> {
    let mut zeta = Array2::zeros(state.positions.raw_dim());
    if noise.is_none() {
        return Ok(zeta);
    }
    for i in 0..state.agents() {
        let key = derive_stream(seed, i as u32, state.step);
        let out = zeta.row_mut(i).into_slice().expect("fresh array is contiguous");
        sample_noise_into(noise, state.agent(i), key, out)?;
    }
    Ok(zeta)
}

/// Where each agent is pulled.
enum Pull<'a> {
    None,
    /// `gain·(target − xⁱ)`.
    Toward { target: &'a [f64], gain: f64 },
    /// `Σⱼ kⱼxʲ − xⁱ Σⱼ kⱼ`.
    Weighted { weighted: Vec<f64>, total: f64 },
}

/// Shared agent update. Plain form: `x + (−η(∇f(x)+ζ)) + η·pull`.
/// Momentum form: `v' = δv + (−η(∇f(x+δv)+ζ))`, `x + v' + η·pull`.
fn agent_updates(
    state: &EnsembleState,
    obj: &dyn Objective,
    zeta: &Array2<f64>,
    momentum: Option<f64>,
    pull: &Pull<'_>,
) -> Result<(Array2<f64>, Option<Array2<f64>>), DynamicsError> {
    let (p, n) = state.positions.dim();
    if zeta.dim() != (p, n) {
        return Err(DynamicsError::NoiseShape { got: zeta.dim(), want: (p, n) });
    }
    if obj.dim() != n {
        return Err(DynamicsError::BadParameter(format!(
            "objective dimension {} but agents have dimension {n}",
            obj.dim()
        )));
    }
    let mut next = Array2::zeros((p, n));
    let mut next_v = momentum.map(|_| Array2::zeros((p, n)));
    let mut grad = vec![0.0; n];
    let mut probe = vec![0.0; n];
    for i in 0..p {
        let x = state.agent(i);
        let eta = state.etas[i];
        let z = row(zeta, i);
        let out = next.row_mut(i).into_slice().expect("fresh array is contiguous");
        match (momentum, state.velocities.as_ref(), next_v.as_mut()) {
            (Some(delta), Some(v), Some(nv)) => {
                let v = row(v, i);
                for c in 0..n {
                    probe[c] = x[c] + delta * v[c];
                }
                obj.gradient(&probe, &mut grad);
                let nv = nv.row_mut(i).into_slice().expect("fresh array is contiguous");
                for c in 0..n {
                    nv[c] = delta * v[c] + -eta * (grad[c] + z[c]);
                    out[c] = x[c] + nv[c];
                }
            }
            (None, _, _) => {
                obj.gradient(x, &mut grad);
                for c in 0..n {
                    out[c] = x[c] + -eta * (grad[c] + z[c]);
                }
            }
            _ => return Err(DynamicsError::MissingVelocities),
        }
        match pull {
            Pull::None => {}
            Pull::Toward { target, gain } => {
                for c in 0..n {
                    out[c] += eta * gain * (target[c] - x[c]);
                }
            }
            Pull::Weighted { weighted, total } => {
                for c in 0..n {
                    out[c] += eta * (weighted[c] - x[c] * total);
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::Divergence { agent: Some(i), step: state.step + 1 });
        }
    }
    Ok((next, next_v))
}

fn require_plain(state: &EnsembleState) -> Result<(), DynamicsError> {
    if state.velocities.is_some() {
        Err(DynamicsError::UnexpectedVelocities)
    } else {
        Ok(())
    }
}

fn require_momentum(state: &EnsembleState, delta: f64) -> Result<(), DynamicsError> {
    if state.velocities.is_none() {
        return Err(DynamicsError::MissingVelocities);
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(DynamicsError::BadParameter(format!("momentum {delta} outside [0, 1)")));
    }
    Ok(())
}

fn require_gain(k: f64) -> Result<(), DynamicsError> {
    if k >= 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(DynamicsError::BadParameter(format!("coupling gain {k}")))
    }
}

fn finish(
    state: &EnsembleState,
    positions: Array2<f64>,
    velocities: Option<Array2<f64>>,
    quorum: Option<Vec<f64>>,
) -> Result<EnsembleState, DynamicsError> {
    if quorum.as_ref().is_some_and(|q| q.iter().any(|v| !v.is_finite())) {
        return Err(DynamicsError::Divergence { agent: None, step: state.step + 1 });
    }
    Ok(EnsembleState {
        positions,
        velocities,
        quorum,
        etas: state.etas.clone(),
        step: state.step + 1,
    })
}

/// Uncoupled SGD for every agent.
pub fn apply_sgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_plain(state)?;
    let (x, _) = agent_updates(state, obj, zeta, None, &Pull::None)?;
    finish(state, x, None, state.quorum.clone())
}

pub fn step_sgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_sgd(state, obj, &draw_noise(state, noise, seed)?)
}

/// Reporting average `x̄ ← γx• + (1−γ)x̄`; never fed back into the dynamics.
fn update_ema(quorum: &Option<Vec<f64>>, positions: &Array2<f64>) -> Option<Vec<f64>> {
    quorum.as_ref().map(|q| {
        let com = center_of_mass(positions.view());
        q.iter()
            .zip(&com)
            .map(|(old, new)| EMA_WEIGHT * new + (1.0 - EMA_WEIGHT) * old)
            .collect()
    })
}

/// QSGD: every agent is pulled toward the pre-step center of mass with gain
/// `k`. A present quorum is treated as the reporting average.
pub fn apply_qsgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_plain(state)?;
    require_gain(k)?;
    let com = state.center_of_mass();
    let (x, _) = agent_updates(state, obj, zeta, None, &Pull::Toward { target: &com, gain: k })?;
    let ema = update_ema(&state.quorum, &x);
    finish(state, x, None, ema)
}

pub fn step_qsgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_qsgd(state, obj, k, &draw_noise(state, noise, seed)?)
}

/// Heavy-ball QSGD with look-ahead gradient and position-only coupling.
pub fn apply_qsgd_momentum(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    delta: f64,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_momentum(state, delta)?;
    require_gain(k)?;
    let com = state.center_of_mass();
    let (x, v) =
        agent_updates(state, obj, zeta, Some(delta), &Pull::Toward { target: &com, gain: k })?;
    let ema = update_ema(&state.quorum, &x);
    finish(state, x, v, ema)
}

pub fn step_qsgd_momentum(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    delta: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_qsgd_momentum(state, obj, k, delta, &draw_noise(state, noise, seed)?)
}

/// `x̃ + k Σᵢ ηᵢ (xⁱ − x̃)` from pre-step values.
fn elastic_quorum(state: &EnsembleState, quorum: &[f64], k: f64) -> Vec<f64> {
    let mut drift = vec![0.0; quorum.len()];
    for i in 0..state.agents() {
        let eta = state.etas[i];
        for (d, (x, q)) in drift.iter_mut().zip(state.agent(i).iter().zip(quorum)) {
            *d += eta * (x - q);
        }
    }
    quorum.iter().zip(&drift).map(|(q, d)| q + k * d).collect()
}

/// EASGD: agents pulled toward `x̃`, which is pulled toward the agents.
pub fn apply_easgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_plain(state)?;
    require_gain(k)?;
    let quorum = state.quorum.as_deref().ok_or(DynamicsError::MissingQuorum)?;
    let (x, _) = agent_updates(state, obj, zeta, None, &Pull::Toward { target: quorum, gain: k })?;
    let q = elastic_quorum(state, quorum, k);
    finish(state, x, None, Some(q))
}

pub fn step_easgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_easgd(state, obj, k, &draw_noise(state, noise, seed)?)
}

/// EASGD with Nesterov momentum; the noisy gradient is taken at `x + δv`.
pub fn apply_easgd_nesterov(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    delta: f64,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_momentum(state, delta)?;
    require_gain(k)?;
    let quorum = state.quorum.as_deref().ok_or(DynamicsError::MissingQuorum)?;
    let (x, v) =
        agent_updates(state, obj, zeta, Some(delta), &Pull::Toward { target: quorum, gain: k })?;
    let q = elastic_quorum(state, quorum, k);
    finish(state, x, v, Some(q))
}

pub fn step_easgd_nesterov(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    delta: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_easgd_nesterov(state, obj, k, delta, &draw_noise(state, noise, seed)?)
}

/// Index of the smallest score; ties go to the lowest index and NaN never wins.
pub fn best_agent(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            _ if s.is_nan() => {}
            None => best = Some(i),
            Some(b) if s < scores[b] => best = Some(i),
            _ => {}
        }
    }
    best.or(if scores.is_empty() { None } else { Some(0) })
}

/// SD-QSGD with per-agent gains from `schedule`. At each WTA epoch boundary
/// the leader is re-elected from `scores`. Uses the momentum form when the
/// state carries velocities and `delta` is given.
pub fn apply_sd_qsgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    schedule: &mut CouplingSchedule,
    delta: Option<f64>,
    zeta: &Array2<f64>,
    scores: &[f64],
) -> Result<EnsembleState, DynamicsError> {
    let p = state.agents();
    if scores.len() != p {
        return Err(DynamicsError::BadScores);
    }
    match delta {
        Some(d) => require_momentum(state, d)?,
        None => require_plain(state)?,
    }
    if let CouplingSchedule::WtaSpike(w) = schedule {
        if w.is_epoch_start(state.step) {
            w.leader = best_agent(scores).ok_or(DynamicsError::BadScores)?;
        }
    }
    let com;
    let pull = match schedule.gains(state.step, p)? {
        Gains::Uniform(k) => {
            require_gain(k)?;
            com = state.center_of_mass();
            Pull::Toward { target: &com, gain: k }
        }
        Gains::PerAgent(gains) => {
            let n = state.dim();
            let mut weighted = vec![0.0; n];
            for (j, kj) in gains.iter().enumerate() {
                for (w, x) in weighted.iter_mut().zip(state.agent(j)) {
                    *w += kj * x;
                }
            }
            Pull::Weighted { weighted, total: gains.iter().sum() }
        }
    };
    let (x, v) = agent_updates(state, obj, zeta, delta, &pull)?;
    let ema = update_ema(&state.quorum, &x);
    finish(state, x, v, ema)
}

pub fn step_sd_qsgd(
    state: &EnsembleState,
    obj: &dyn Objective,
    schedule: &mut CouplingSchedule,
    delta: Option<f64>,
    noise: &NoiseModel,
    seed: u64,
    scores: &[f64],
) -> Result<EnsembleState, DynamicsError> {
    apply_sd_qsgd(state, obj, schedule, delta, &draw_noise(state, noise, seed)?, scores)
}

/// Right-hand side `g(x̃, x•)` of the quorum variable's own dynamics.
#[derive(Clone)]
pub enum QuorumFilter {
    /// `g ≡ 0`.
    Frozen,
    /// `g = c(x• − x̃)`.
    Linear(f64),
    /// `g = tanh(s(x• − x̃))` componentwise; bounded by 1.
    Tanh(f64),
    Custom(Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>),
}

impl fmt::Debug for QuorumFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Frozen => write!(f, "Frozen"),
            Self::Linear(c) => write!(f, "Linear({c})"),
            Self::Tanh(s) => write!(f, "Tanh({s})"),
            Self::Custom(_) => write!(f, "Custom(<rule>)"),
        }
    }
}

impl QuorumFilter {
    pub fn rate(&self, quorum: &[f64], mean: &[f64], out: &mut [f64]) {
        match self {
            Self::Frozen => out.fill(0.0),
            Self::Linear(c) => {
                for (o, (q, m)) in out.iter_mut().zip(quorum.iter().zip(mean)) {
                    *o = c * (m - q);
                }
            }
            Self::Tanh(s) => {
                for (o, (q, m)) in out.iter_mut().zip(quorum.iter().zip(mean)) {
                    *o = (s * (m - q)).tanh();
                }
            }
            Self::Custom(rule) => rule(quorum, mean, out),
        }
    }
}

/// Agents coupled to `x̃` as in QSGD; `x̃ ← x̃ + η_q·g(x̃, x•)`.
pub fn apply_generic_quorum(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    filter: &QuorumFilter,
    eta_quorum: f64,
    zeta: &Array2<f64>,
) -> Result<EnsembleState, DynamicsError> {
    require_plain(state)?;
    require_gain(k)?;
    let quorum = state.quorum.as_deref().ok_or(DynamicsError::MissingQuorum)?;
    let (x, _) = agent_updates(state, obj, zeta, None, &Pull::Toward { target: quorum, gain: k })?;
    let com = state.center_of_mass();
    let mut rate = vec![0.0; quorum.len()];
    filter.rate(quorum, &com, &mut rate);
    let q = quorum.iter().zip(&rate).map(|(q, r)| q + eta_quorum * r).collect();
    finish(state, x, None, Some(q))
}

pub fn step_generic_quorum(
    state: &EnsembleState,
    obj: &dyn Objective,
    k: f64,
    filter: &QuorumFilter,
    eta_quorum: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<EnsembleState, DynamicsError> {
    apply_generic_quorum(state, obj, k, filter, eta_quorum, &draw_noise(state, noise, seed)?)
}

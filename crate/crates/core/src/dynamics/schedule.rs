//! Coupling-gain schedules and the per-agent learning-rate decay rule.

use super::DynamicsError;

/// Gains applied in one step.
#[derive(Debug, Clone, PartialEq)]
pub enum Gains {
    /// Every agent has gain `k/p`; coupling is `k(x• − xⁱ)`.
    Uniform(f64),
    /// Explicit `k_j` per agent.
    PerAgent(Vec<f64>),
}

/// Spiking winner-take-all schedule. Each epoch opens with a spike on the
/// leader that relaxes to uniform gains over `spike_len` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WtaSpike {
    /// Total gain once relaxed.
    pub k: f64,
    /// Spike multiplier `M ≥ 1`; the leader starts at `Mk`.
    pub boost: f64,
    /// Relaxation time constant in steps.
    pub tau: f64,
    /// Steps until all gains equal `k/p`.
    pub spike_len: u64,
    pub epoch_len: u64,
    /// Current best agent.
    pub leader: usize,
}

impl WtaSpike {
    /// Default shape: `M = 10`, spike over a quarter of
    /// the epoch, `τ` a sixteenth of the spike.
    pub fn with_default_shape(k: f64, epoch_len: u64) -> Self {
        let spike_len = (epoch_len / 4).max(1);
        Self { k, boost: 10.0, tau: spike_len as f64 / 16.0, spike_len, epoch_len, leader: 0 }
    }

    pub fn is_epoch_start(&self, step: u64) -> bool {
        step % self.epoch_len.max(1) == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CouplingSchedule {
    Constant(f64),
    /// Linear ramp from `start` to `end` over `ramp_steps`, then constant.
    TimeRamp { start: f64, end: f64, ramp_steps: u64 },
    WtaSpike(WtaSpike),
}

impl CouplingSchedule {
    /// Total gain at `step` for the uniform variants; the relaxed total for WTA.
    pub fn total_gain(&self, step: u64) -> f64 {
        match self {
            Self::Constant(k) => *k,
            Self::TimeRamp { start, end, ramp_steps } => {
                if *ramp_steps == 0 || step >= *ramp_steps {
                    *end
                } else {
                    start + (end - start) * step as f64 / *ramp_steps as f64
                }
            }
            Self::WtaSpike(w) => w.k,
        }
    }

    pub fn gains(&self, step: u64, p: usize) -> Result<Gains, DynamicsError> {
        match self {
            Self::WtaSpike(w) => {
                let t = step % w.epoch_len.max(1);
                if t >= w.spike_len {
                    Ok(Gains::Uniform(w.k))
                } else {
                    wta_gains(t as f64, w.leader, w.k, w.boost, w.tau, w.spike_len as f64, p)
                        .map(Gains::PerAgent)
                }
            }
            other => Ok(Gains::Uniform(other.total_gain(step))),
        }
    }
}

/// Per-agent gains `t` steps into an epoch.
pub fn wta_gains(
    t: f64,
    leader: usize,
    k: f64,
    boost: f64,
    tau: f64,
    spike_len: f64,
    p: usize,
) -> Result<Vec<f64>, DynamicsError> {
    let bad = |msg: String| Err(DynamicsError::BadParameter(msg));
    if p == 0 || leader >= p {
        return bad(format!("leader {leader} for {p} agents"));
    }
    if !(t >= 0.0 && t <= spike_len) {
        return bad(format!("time {t} outside [0, {spike_len}]"));
    }
    if !(boost >= 1.0) || !(tau > 0.0) || !(spike_len > 0.0) {
        return bad(format!("boost {boost}, tau {tau}, spike length {spike_len}"));
    }
    let base = k / p as f64;
    if t == spike_len {
        return Ok(vec![base; p]);
    }
    let rise = (t / tau).exp_m1() / (spike_len / tau).exp_m1();
    let mut gains = vec![base * rise; p];
    gains[leader] = base + (boost * p as f64 - 1.0) * base * (-t / tau).exp();
    Ok(gains)
}

/// Learning-rate divisors applied in order; after the last one the rate is fixed.
pub const LR_DECAY_FACTORS: [f64; 3] = [5.0, 2.0, 2.0];
/// Consecutive checks with an unchanged reference before a decay.
pub const LR_PATIENCE: u32 = 5;
/// Relative change that moves the reference loss.
pub const LR_THRESHOLD: f64 = 0.01;

/// Per-agent bookkeeping for the stall-triggered step decay.
#[derive(Debug, Clone, PartialEq)]
pub struct LrScheduleState {
    reference: Vec<Option<f64>>,
    stalls: Vec<u32>,
    decays: Vec<usize>,
}

impl LrScheduleState {
    pub fn new(p: usize) -> Self {
        Self { reference: vec![None; p], stalls: vec![0; p], decays: vec![0; p] }
    }

    pub fn decays(&self) -> &[usize] {
        &self.decays
    }
}

/// Feeds one loss check per agent. A loss moving more than 1% away from the
/// agent's reference becomes the new reference; otherwise the stall count
/// grows and, at the patience limit, the agent's rate is divided by the next
/// factor.
pub fn lr_schedule_step(etas: &[f64], state: &mut LrScheduleState, losses: &[f64]) -> Vec<f64> {
    let mut out = etas.to_vec();
    for (i, &loss) in losses.iter().enumerate().take(etas.len()) {
        let Some(reference) = state.reference[i] else {
            state.reference[i] = Some(loss);
            continue;
        };
        if (loss - reference).abs() > LR_THRESHOLD * reference.abs() {
            state.reference[i] = Some(loss);
            state.stalls[i] = 0;
            continue;
        }
        state.stalls[i] += 1;
        if state.stalls[i] >= LR_PATIENCE {
            state.stalls[i] = 0;
            if let Some(factor) = LR_DECAY_FACTORS.get(state.decays[i]) {
                out[i] /= factor;
                state.decays[i] += 1;
            }
        }
    }
    out
}

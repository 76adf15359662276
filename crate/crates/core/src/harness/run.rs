//! Seeded single runs, ensembles and parameter sweeps.

use super::config::{Algorithm, Built, EtaSpec, InitSpec, ScheduleSpec, SimulationConfig};
use super::HarnessError;
use crate::analysis::{norm, post_burn_in_mean, TrajectoryDiagnostics};
use crate::dynamics::{
    euler_maruyama_step, lr_schedule_step, step_easgd, step_easgd_nesterov, step_generic_quorum,
    step_qsgd, step_qsgd_momentum, step_sd_qsgd, step_sgd, CouplingSchedule, DriftKind,
    DynamicsError, EnsembleState, LrScheduleState, SdeParams,
};
use crate::stochastic::{derive_stream, run_seed};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Draw index of the initial positions; noise uses index 0.
const INIT_DRAW: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Stopped at this step with spread and gradient under the tolerance.
    Converged(u64),
    /// A non-finite value appeared at this step.
    Diverged(u64),
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub run_index: u64,
    /// Seed of this run's streams.
    pub seed: u64,
    /// Last finite positions, `p × n`.
    pub final_positions: Array2<f64>,
    /// The quorum variable when the algorithm has one, otherwise `x•`.
    pub final_quorum: Vec<f64>,
    /// Records at every `record_stride` steps and at the final step.
    pub diagnostics: TrajectoryDiagnostics,
    pub outcome: Outcome,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.outcome, Outcome::Diverged(_))
    }
}

/// Aggregates over the runs that did not diverge.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub runs: usize,
    pub diverged: usize,
    pub converged: usize,
    /// All agents' final positions, rows grouped by run.
    pub agent_finals: Vec<(u64, usize, Vec<f64>)>,
    pub quorum_finals: Vec<(u64, Vec<f64>)>,
    /// Per-record average across runs.
    pub mean_diagnostics: TrajectoryDiagnostics,
    /// Post-burn-in means of the averaged series, in diagnostics order.
    pub post_burn_in: PostBurnIn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PostBurnIn {
    pub sync_measure: Option<f64>,
    pub eps_norm: Option<f64>,
    pub loss_quorum: Option<f64>,
    pub loss_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub records: Vec<RunRecord>,
    pub summary: EnsembleSummary,
}

/// A validated configuration with its built objects, reusable across runs.
pub struct Experiment {
    config: SimulationConfig,
    built: Built,
    hash: String,
}

impl Experiment {
    pub fn new(config: &SimulationConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        Ok(Self { config: config.clone(), built: config.build()?, hash: config.hash() })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn built(&self) -> &Built {
        &self.built
    }

    fn initial_state(&self, seed: u64) -> Result<EnsembleState, DynamicsError> {
        let p = self.config.agents;
        let n = self.built.objective.dim();
        let positions = match &self.config.init {
            InitSpec::Point { x } => Array2::from_shape_fn((p, n), |(_, c)| x[c]),
            InitSpec::Uniform { lo, hi } => {
                let mut pos = Array2::zeros((p, n));
                for (i, mut row) in pos.rows_mut().into_iter().enumerate() {
                    let mut rng = derive_stream(seed, i as u32, 0).with_draw(INIT_DRAW).rng();
                    for v in row.iter_mut() {
                        *v = rng.random_range(*lo..=*hi);
                    }
                }
                pos
            }
        };
        let mut state = EnsembleState::new(positions, self.built.etas.clone())?;
        let alg = self.config.algorithm;
        if alg.uses_momentum() || (alg == Algorithm::SdQsgd && self.config.delta.is_some()) {
            state = state.with_velocities();
        }
        if alg.has_quorum_state() || self.config.ema {
            state = state.with_quorum_at_mean();
        }
        Ok(state)
    }

    fn step(
        &self,
        state: &EnsembleState,
        schedule: &mut CouplingSchedule,
        seed: u64,
        scores: &mut [f64],
    ) -> Result<EnsembleState, DynamicsError> {
        let c = &self.config;
        let b = &self.built;
        let obj = b.objective.as_ref();
        let k = schedule.total_gain(state.step);
        let delta = c.delta.unwrap_or(0.0);
        match c.algorithm {
            Algorithm::Sgd => step_sgd(state, obj, &b.noise, seed),
            Algorithm::Qsgd => step_qsgd(state, obj, k, &b.noise, seed),
            Algorithm::QsgdMomentum => step_qsgd_momentum(state, obj, k, delta, &b.noise, seed),
            Algorithm::Easgd => step_easgd(state, obj, k, &b.noise, seed),
            Algorithm::EasgdNesterov => step_easgd_nesterov(state, obj, k, delta, &b.noise, seed),
            Algorithm::SdQsgd => {
                if let CouplingSchedule::WtaSpike(w) = schedule {
                    if w.is_epoch_start(state.step) {
                        for (i, s) in scores.iter_mut().enumerate() {
                            *s = obj.value(state.agent(i));
                        }
                    }
                }
                step_sd_qsgd(state, obj, schedule, c.delta, &b.noise, seed, scores)
            }
            Algorithm::GenericQuorum => {
                let eta_q = c.eta_quorum.unwrap_or(b.etas[0]);
                step_generic_quorum(state, obj, k, &b.filter, eta_q, &b.noise, seed)
            }
            Algorithm::QsgdSde | Algorithm::EasgdSde => {
                let drift =
                    if c.algorithm == Algorithm::QsgdSde { DriftKind::Qsgd } else { DriftKind::Easgd };
                let params = SdeParams { k, dt: c.dt.unwrap_or(0.0), batch: 1.0 };
                euler_maruyama_step(state, drift, obj, &params, &b.noise, seed)
            }
        }
    }

    fn converged(&self, state: &EnsembleState, diags: &TrajectoryDiagnostics) -> bool {
        let Some(tol) = self.config.tolerance else { return false };
        let spread = diags.sync_measure.last().copied().unwrap_or(f64::INFINITY);
        let grad = self.built.objective.gradient_vec(&state.center_of_mass());
        spread <= tol && norm(&grad) <= tol
    }

    /// Executes one run. Divergence ends the run and is reported in the
    /// outcome; any other error indicates an invalid configuration.
    pub fn run(&self, run_index: u64) -> Result<RunRecord, HarnessError> {
        let c = &self.config;
        let obj = self.built.objective.as_ref();
        let seed = run_seed(c.seed, run_index);
        let mut state = self.initial_state(seed)?;
        let mut schedule = self.built.schedule.clone();
        let mut lr = LrScheduleState::new(c.agents);
        let mut scores = vec![0.0; c.agents];
        let mut diags = TrajectoryDiagnostics::default();
        let mut outcome = Outcome::MaxIters;
        while state.step < c.iterations {
            if state.step % c.record_stride == 0 {
                diags.record(obj, &state);
                if self.converged(&state, &diags) {
                    outcome = Outcome::Converged(state.step);
                    break;
                }
            }
            match self.step(&state, &mut schedule, seed, &mut scores) {
                Ok(next) => state = next,
                Err(DynamicsError::Divergence { step, .. }) => {
                    outcome = Outcome::Diverged(step);
                    diags.truncate_before(step);
                    break;
                }
                Err(e) => return Err(e.into()),
            }
            if c.lr_schedule && state.step % c.lr_check_interval == 0 {
                let losses: Vec<f64> = (0..c.agents).map(|i| obj.value(state.agent(i))).collect();
                state.etas = lr_schedule_step(&state.etas, &mut lr, &losses);
            }
        }
        if outcome == Outcome::MaxIters && diags.step.last() != Some(&state.step) {
            diags.record(obj, &state);
        }
        let final_quorum = state.quorum.clone().unwrap_or_else(|| state.center_of_mass());
        Ok(RunRecord {
            config_hash: self.hash.clone(),
            run_index,
            seed,
            final_positions: state.positions,
            final_quorum,
            diagnostics: diags,
            outcome,
        })
    }

    /// All runs on the current rayon pool, merged in run order.
    pub fn ensemble(&self) -> Result<Ensemble, HarnessError> {
        let records = (0..self.config.runs as u64)
            .into_par_iter()
            .map(|r| self.run(r))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = summarize(&records, self.config.burn_in);
        Ok(Ensemble { records, summary })
    }
}

pub fn run_simulation(config: &SimulationConfig, run_index: u64) -> Result<RunRecord, HarnessError> {
    Experiment::new(config)?.run(run_index)
}

/// Runs the ensemble on the global rayon pool.
pub fn run_ensemble(config: &SimulationConfig) -> Result<Ensemble, HarnessError> {
    Experiment::new(config)?.ensemble()
}

/// Runs the ensemble on a dedicated pool of `threads` workers.
pub fn run_ensemble_with_threads(
    config: &SimulationConfig,
    threads: usize,
) -> Result<Ensemble, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let experiment = Experiment::new(config)?;
    pool.install(|| experiment.ensemble())
}

fn summarize(records: &[RunRecord], burn_in: f64) -> EnsembleSummary {
    let kept: Vec<&RunRecord> = records.iter().filter(|r| !r.diverged()).collect();
    let mut agent_finals = Vec::new();
    let mut quorum_finals = Vec::new();
    for r in &kept {
        for (i, row) in r.final_positions.rows().into_iter().enumerate() {
            agent_finals.push((r.run_index, i, row.to_vec()));
        }
        quorum_finals.push((r.run_index, r.final_quorum.clone()));
    }
    let mean_diagnostics = mean_diagnostics(&kept);
    let pb = |s: &[f64]| post_burn_in_mean(s, burn_in);
    let post_burn_in = PostBurnIn {
        sync_measure: pb(&mean_diagnostics.sync_measure),
        eps_norm: pb(&mean_diagnostics.eps_norm),
        loss_quorum: pb(&mean_diagnostics.loss_quorum),
        loss_mean: pb(&mean_diagnostics.loss_mean),
    };
    EnsembleSummary {
        runs: records.len(),
        diverged: records.len() - kept.len(),
        converged: records.iter().filter(|r| matches!(r.outcome, Outcome::Converged(_))).count(),
        agent_finals,
        quorum_finals,
        mean_diagnostics,
        post_burn_in,
    }
}

/// Average of each record index over the runs that reached it.
fn mean_diagnostics(records: &[&RunRecord]) -> TrajectoryDiagnostics {
    let longest = records.iter().max_by_key(|r| r.diagnostics.len());
    let Some(longest) = longest else { return TrajectoryDiagnostics::default() };
    let len = longest.diagnostics.len();
    let mut out = TrajectoryDiagnostics { step: longest.diagnostics.step.clone(), ..Default::default() };
    for j in 0..len {
        let present: Vec<&TrajectoryDiagnostics> =
            records.iter().map(|r| &r.diagnostics).filter(|d| d.len() > j).collect();
        let m = present.len() as f64;
        let avg = |f: fn(&TrajectoryDiagnostics) -> &Vec<f64>| {
            present.iter().map(|d| f(d)[j]).sum::<f64>() / m
        };
        out.sync_measure.push(avg(|d| &d.sync_measure));
        out.eps_norm.push(avg(|d| &d.eps_norm));
        out.loss_quorum.push(avg(|d| &d.loss_quorum));
        out.loss_mean.push(avg(|d| &d.loss_mean));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    P,
    Eta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::K => "k",
            Self::P => "p",
            Self::Eta => "eta",
        }
    }
}

/// `base` with the axis set to `value`.
pub fn substitute(
    base: &SimulationConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<SimulationConfig, HarnessError> {
    let mut c = base.clone();
    match axis {
        SweepAxis::K => match &mut c.schedule {
            None => c.k = value,
            Some(ScheduleSpec::Constant { k }) | Some(ScheduleSpec::Wta { k, .. }) => *k = value,
            Some(ScheduleSpec::Ramp { .. }) => {
                return Err(HarnessError::Config("cannot sweep k over a ramp schedule".into()))
            }
        },
        SweepAxis::P => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(HarnessError::Config(format!("agent count {value} is not a positive integer")));
            }
            if matches!(c.eta, EtaSpec::PerAgent(_)) {
                return Err(HarnessError::Config("cannot sweep p with per-agent rates".into()));
            }
            c.agents = value as usize;
        }
        SweepAxis::Eta => c.eta = EtaSpec::Scalar(value),
    }
    c.validate()?;
    Ok(c)
}

/// One ensemble per value, in the given order.
pub fn run_sweep(
    base: &SimulationConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<(f64, SimulationConfig, Ensemble)>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            let c = substitute(base, axis, v)?;
            let e = run_ensemble(&c)?;
            Ok((v, c, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn config(extra: &str) -> SimulationConfig {
        let text = format!(
            r#"
algorithm = "qsgd"
agents = 8
iterations = 300
eta = 0.05
k = 2.0
record_stride = 50
runs = 3
{extra}
objective = {{ kind = "double_well", scale = 150.0 }}
noise = {{ kind = "uniform", half_width = 1.5 }}
init = {{ kind = "uniform", lo = -3.0, hi = 3.0 }}
"#
        );
        SimulationConfig::from_toml(&text, Path::new(".")).unwrap()
    }

    #[test]
    fn runs_are_deterministic() {
        let c = config("");
        assert_eq!(run_simulation(&c, 1).unwrap(), run_simulation(&c, 1).unwrap());
        assert_ne!(
            run_simulation(&c, 1).unwrap().final_positions,
            run_simulation(&c, 2).unwrap().final_positions
        );
    }

    #[test]
    fn records_every_stride_and_final() {
        let r = run_simulation(&config(""), 0).unwrap();
        assert_eq!(r.diagnostics.step, vec![0, 50, 100, 150, 200, 250, 300]);
        assert_eq!(r.outcome, Outcome::MaxIters);
        let r = run_simulation(&config("").clone_with_iterations(120), 0).unwrap();
        assert_eq!(r.diagnostics.step, vec![0, 50, 100, 120]);
    }

    #[test]
    fn single_run_summary_matches_record() {
        let mut c = config("");
        c.runs = 1;
        let e = run_ensemble(&c).unwrap();
        assert_eq!(e.summary.mean_diagnostics, e.records[0].diagnostics);
        assert_eq!(e.summary.quorum_finals[0].1, e.records[0].final_quorum);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let c = config("");
        assert_eq!(run_ensemble_with_threads(&c, 1).unwrap(), run_ensemble_with_threads(&c, 3).unwrap());
    }

    #[test]
    fn divergence_is_an_outcome() {
        let c = config("").with_eta(5.0);
        let r = run_simulation(&c, 0).unwrap();
        let Outcome::Diverged(step) = r.outcome else { panic!("{:?}", r.outcome) };
        assert!(r.diagnostics.step.iter().all(|&s| s < step));
    }

    #[test]
    fn tolerance_stops_early() {
        let c = config("tolerance = 1e-6").with_noise_off();
        let r = run_simulation(&c.clone_with_iterations(100_000), 0).unwrap();
        assert!(matches!(r.outcome, Outcome::Converged(s) if s < 100_000));
    }

    #[test]
    fn single_value_sweep_equals_ensemble() {
        let c = config("");
        let sweep = run_sweep(&c, SweepAxis::K, &[2.0]).unwrap();
        assert_eq!(sweep[0].2, run_ensemble(&c).unwrap());
    }

    impl SimulationConfig {
        fn clone_with_iterations(&self, iterations: u64) -> Self {
            Self { iterations, ..self.clone() }
        }
        fn with_eta(&self, eta: f64) -> Self {
            Self { eta: EtaSpec::Scalar(eta), ..self.clone() }
        }
        fn with_noise_off(&self) -> Self {
            Self { noise: super::super::config::NoiseSpec::None, ..self.clone() }
        }
    }
}

//! Experiment configuration: a TOML file parsed with serde, validated, and
//! turned into concrete objective, noise and schedule objects.

use super::HarnessError;
use crate::dynamics::{CouplingSchedule, QuorumFilter, WtaSpike};
use crate::objectives::{DoubleWell, NdLoss, Objective, Quadratic};
use crate::stochastic::NoiseModel;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Ensemble shape of the full-scale protocol.
pub const FULL_SCALE_RUNS: usize = 250;
pub const FULL_SCALE_AGENTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveSpec {
    DoubleWell {
        scale: f64,
    },
    NdLoss {
        dim: usize,
        scale: f64,
    },
    /// Exactly one of `diag`, `rows` or `file` (CSV of rows, no header).
    /// Loading replaces `file` with the `rows` it contains.
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diag: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
    },
}

/// Per-coordinate perturbation before division by `√batch`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    #[default]
    None,
    Uniform {
        half_width: f64,
    },
    Gaussian {
        sigma: f64,
    },
    /// `Bξ`; `B` given as rows or as a CSV file, like the quadratic.
    Matrix {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Every coordinate of every agent drawn from `U(lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Every agent starts at `x`.
    Point { x: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        k: f64,
    },
    Ramp {
        start: f64,
        end: f64,
        steps: u64,
    },
    /// Winner-take-all spikes; shape parameters default to the standard
    /// proportions of the epoch.
    Wta {
        k: f64,
        epoch: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        boost: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spike: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterSpec {
    Frozen,
    Linear { rate: f64 },
    Tanh { slope: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Qsgd,
    QsgdMomentum,
    Easgd,
    EasgdNesterov,
    SdQsgd,
    GenericQuorum,
    QsgdSde,
    EasgdSde,
}

impl Algorithm {
    pub fn uses_momentum(self) -> bool {
        matches!(self, Self::QsgdMomentum | Self::EasgdNesterov)
    }

    pub fn is_sde(self) -> bool {
        matches!(self, Self::QsgdSde | Self::EasgdSde)
    }

    /// Whether the quorum variable has its own dynamics.
    pub fn has_quorum_state(self) -> bool {
        matches!(self, Self::Easgd | Self::EasgdNesterov | Self::GenericQuorum | Self::EasgdSde)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Scalar(f64),
    PerAgent(Vec<f64>),
}

fn default_batch() -> f64 {
    1.0
}
fn default_stride() -> u64 {
    100
}
fn default_runs() -> usize {
    1
}
fn default_burn_in() -> f64 {
    crate::analysis::DEFAULT_BURN_IN
}
fn default_lr_check() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub algorithm: Algorithm,
    pub agents: usize,
    pub iterations: u64,
    pub eta: EtaSpec,
    /// Constant coupling gain; ignored when `schedule` is set.
    #[serde(default)]
    pub k: f64,
    /// Momentum coefficient for the momentum algorithms, and for `sd_qsgd`
    /// to select its momentum form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Time step of the SDE algorithms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Minibatch size; divides the noise amplitude by `√batch`.
    #[serde(default = "default_batch")]
    pub batch: f64,
    /// Quorum dynamics of `generic_quorum`, with their own step size
    /// (defaults to the first agent's rate).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_quorum: Option<f64>,
    /// Track an exponential average of the center of mass as the reported
    /// quorum of the mean-coupled algorithms.
    #[serde(default)]
    pub ema: bool,
    #[serde(default)]
    pub lr_schedule: bool,
    /// Steps between learning-rate checks.
    #[serde(default = "default_lr_check")]
    pub lr_check_interval: u64,
    #[serde(default = "default_stride")]
    pub record_stride: u64,
    /// A run stops as converged once the spread and the gradient norm at the
    /// center of mass both fall below this at a record point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterSpec>,
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

fn finite_nonneg(name: &str, v: f64) -> Result<(), HarnessError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        config_err(format!("{name} = {v} must be finite and nonnegative"))
    }
}

/// Reads a headerless CSV of numeric rows.
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, HarnessError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return config_err(format!("{what} must be a nonempty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Resolves `file` against `base` and inlines its rows.
fn inline_file(
    rows: &mut Option<Vec<Vec<f64>>>,
    file: &mut Option<PathBuf>,
    base: &Path,
) -> Result<(), HarnessError> {
    if let Some(f) = file.take() {
        if rows.is_some() {
            return config_err("give either rows or file, not both");
        }
        let path = if f.is_absolute() { f } else { base.join(f) };
        if !path.is_file() {
            return config_err(format!("referenced file {} does not exist", path.display()));
        }
        *rows = Some(read_matrix_csv(&path)?);
    }
    Ok(())
}

/// Objective, noise and schedule built from a validated configuration.
pub struct Built {
    pub objective: Arc<dyn Objective>,
    /// Noise with the `1/√batch` factor applied.
    pub noise: NoiseModel,
    /// Noise as configured, for the bound constants.
    pub raw_noise: NoiseModel,
    pub schedule: CouplingSchedule,
    pub filter: QuorumFilter,
    pub etas: Vec<f64>,
}

impl SimulationConfig {
    /// Parses TOML text; relative file references resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut config: Self =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.inline_files(base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn inline_files(&mut self, base: &Path) -> Result<(), HarnessError> {
        if let ObjectiveSpec::Quadratic { rows, file, .. } = &mut self.objective {
            inline_file(rows, file, base)?;
        }
        if let NoiseSpec::Matrix { rows, file } = &mut self.noise {
            inline_file(rows, file, base)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML serialization, in hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Replaces the ensemble shape with the full-scale protocol's.
    pub fn full_scale(mut self) -> Self {
        self.runs = FULL_SCALE_RUNS;
        self.agents = FULL_SCALE_AGENTS;
        self
    }

    pub fn dim(&self) -> usize {
        match &self.objective {
            ObjectiveSpec::DoubleWell { .. } => 1,
            ObjectiveSpec::NdLoss { dim, .. } => *dim,
            ObjectiveSpec::Quadratic { diag: Some(d), .. } => d.len(),
            ObjectiveSpec::Quadratic { rows: Some(r), .. } => r.len(),
            ObjectiveSpec::Quadratic { .. } => 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.iterations < 1 {
            return config_err("iterations must be at least 1");
        }
        if self.agents < 1 {
            return config_err("agents must be at least 1");
        }
        if self.runs < 1 {
            return config_err("runs must be at least 1");
        }
        if self.record_stride < 1 {
            return config_err("record_stride must be at least 1");
        }
        if self.lr_schedule && self.lr_check_interval < 1 {
            return config_err("lr_check_interval must be at least 1");
        }
        if !(self.batch >= 1.0 && self.batch.is_finite()) {
            return config_err(format!("batch = {} must be at least 1", self.batch));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return config_err(format!("burn_in = {} must lie in [0, 1)", self.burn_in));
        }
        finite_nonneg("k", self.k)?;
        if let Some(tol) = self.tolerance {
            finite_nonneg("tolerance", tol)?;
        }
        match &self.eta {
            EtaSpec::Scalar(e) => finite_nonneg("eta", *e)?,
            EtaSpec::PerAgent(etas) => {
                if etas.len() != self.agents {
                    return config_err(format!("{} rates for {} agents", etas.len(), self.agents));
                }
                for e in etas {
                    finite_nonneg("eta", *e)?;
                }
            }
        }
        match (self.algorithm.uses_momentum(), self.delta) {
            (true, None) => return config_err("momentum algorithms need delta"),
            (_, Some(d)) if !(0.0..1.0).contains(&d) => {
                return config_err(format!("delta = {d} must lie in [0, 1)"))
            }
            (false, Some(_)) if self.algorithm != Algorithm::SdQsgd => {
                return config_err("delta is only used by momentum algorithms and sd_qsgd")
            }
            _ => {}
        }
        if self.algorithm.is_sde() {
            match self.dt {
                Some(dt) if dt > 0.0 && dt.is_finite() => {}
                _ => return config_err("SDE algorithms need a positive dt"),
            }
        }
        if self.filter.is_some() && self.algorithm != Algorithm::GenericQuorum {
            return config_err("filter is only used by generic_quorum");
        }
        if let Some(e) = self.eta_quorum {
            finite_nonneg("eta_quorum", e)?;
        }
        match &self.objective {
            ObjectiveSpec::Quadratic { diag, rows, file } => {
                if file.is_some() {
                    return config_err("quadratic file was not loaded");
                }
                if diag.is_some() == rows.is_some() {
                    return config_err("quadratic needs exactly one of diag, rows or file");
                }
            }
            ObjectiveSpec::NdLoss { dim: 0, .. } => return config_err("nd_loss dim must be ≥ 1"),
            _ => {}
        }
        let n = self.dim();
        match &self.init {
            InitSpec::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return config_err(format!("init box [{lo}, {hi}] is empty or non-finite"));
                }
            }
            InitSpec::Point { x } => {
                if x.len() != n || x.iter().any(|v| !v.is_finite()) {
                    return config_err(format!("init point must have {n} finite coordinates"));
                }
            }
        }
        if let Some(s) = &self.schedule {
            match s {
                ScheduleSpec::Constant { k } => finite_nonneg("schedule k", *k)?,
                ScheduleSpec::Ramp { start, end, .. } => {
                    finite_nonneg("ramp start", *start)?;
                    finite_nonneg("ramp end", *end)?;
                }
                ScheduleSpec::Wta { k, epoch, spike, .. } => {
                    finite_nonneg("wta k", *k)?;
                    if *epoch < 1 {
                        return config_err("wta epoch must be at least 1 step");
                    }
                    if spike.is_some_and(|s| s < 1 || s > *epoch) {
                        return config_err("wta spike must lie in [1, epoch]");
                    }
                }
            }
            if matches!(s, ScheduleSpec::Wta { .. }) && self.algorithm != Algorithm::SdQsgd {
                return config_err("wta schedules are only used by sd_qsgd");
            }
        }
        // Building checks the objective, noise and schedule parameters.
        self.build().map(|_| ())
    }

    /// Relaxed total coupling gain.
    pub fn coupling(&self) -> f64 {
        match &self.schedule {
            None => self.k,
            Some(ScheduleSpec::Constant { k }) | Some(ScheduleSpec::Wta { k, .. }) => *k,
            Some(ScheduleSpec::Ramp { end, .. }) => *end,
        }
    }

    pub fn etas(&self) -> Vec<f64> {
        match &self.eta {
            EtaSpec::Scalar(e) => vec![*e; self.agents],
            EtaSpec::PerAgent(v) => v.clone(),
        }
    }

    pub fn build(&self) -> Result<Built, HarnessError> {
        let objective: Arc<dyn Objective> = match &self.objective {
            ObjectiveSpec::DoubleWell { scale } => Arc::new(DoubleWell::new(*scale)?),
            ObjectiveSpec::NdLoss { dim, scale } => Arc::new(NdLoss::new(*dim, *scale)?),
            ObjectiveSpec::Quadratic { diag: Some(d), .. } => Arc::new(Quadratic::diagonal(d)?),
            ObjectiveSpec::Quadratic { rows: Some(r), .. } => {
                Arc::new(Quadratic::new(rows_to_matrix(r, "quadratic rows")?)?)
            }
            ObjectiveSpec::Quadratic { .. } => return config_err("quadratic has no Hessian"),
        };
        let n = objective.dim();
        let raw_noise = match &self.noise {
            NoiseSpec::None => NoiseModel::None,
            NoiseSpec::Uniform { half_width } => NoiseModel::uniform(*half_width)?,
            NoiseSpec::Gaussian { sigma } => NoiseModel::gaussian(*sigma)?,
            NoiseSpec::Matrix { rows: Some(r), .. } => {
                let b = rows_to_matrix(r, "noise matrix")?;
                if b.nrows() != n {
                    return config_err(format!("noise matrix has {} rows for dimension {n}", b.nrows()));
                }
                NoiseModel::matrix(b)?
            }
            NoiseSpec::Matrix { .. } => return config_err("noise matrix has no rows"),
        };
        let scale = self.batch.sqrt().recip();
        let noise = match &raw_noise {
            NoiseModel::Uniform(a) => NoiseModel::Uniform(a * scale),
            NoiseModel::Gaussian(s) => NoiseModel::Gaussian(s * scale),
            NoiseModel::ConstantMatrix(b) => NoiseModel::ConstantMatrix(b * scale),
            other => other.clone(),
        };
        let schedule = match &self.schedule {
            None => CouplingSchedule::Constant(self.k),
            Some(ScheduleSpec::Constant { k }) => CouplingSchedule::Constant(*k),
            Some(ScheduleSpec::Ramp { start, end, steps }) => {
                CouplingSchedule::TimeRamp { start: *start, end: *end, ramp_steps: *steps }
            }
            Some(ScheduleSpec::Wta { k, epoch, boost, spike, tau }) => {
                let mut w = WtaSpike::with_default_shape(*k, *epoch);
                if let Some(s) = spike {
                    w.spike_len = *s;
                    w.tau = *s as f64 / 16.0;
                }
                if let Some(b) = boost {
                    w.boost = *b;
                }
                if let Some(t) = tau {
                    w.tau = *t;
                }
                if !(w.boost >= 1.0 && w.tau > 0.0 && w.tau.is_finite()) {
                    return config_err("wta needs boost ≥ 1 and tau > 0");
                }
                CouplingSchedule::WtaSpike(w)
            }
        };
        let filter = match &self.filter {
            None | Some(FilterSpec::Frozen) => QuorumFilter::Frozen,
            Some(FilterSpec::Linear { rate }) => QuorumFilter::Linear(*rate),
            Some(FilterSpec::Tanh { slope }) => QuorumFilter::Tanh(*slope),
        };
        Ok(Built { objective, noise, raw_noise, schedule, filter, etas: self.etas() })
    }
}

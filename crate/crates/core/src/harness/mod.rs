//! Configuration, seeded ensemble execution, sweeps, file output and the CLI.

mod bounds;
mod cli;
mod config;
mod output;
mod run;

pub use bounds::{bound_inputs, bound_table, curvature, render_table, BoundRow};
pub use cli::cli_main;
pub use config::{
    read_matrix_csv, Algorithm, Built, EtaSpec, FilterSpec, InitSpec, NoiseSpec, ObjectiveSpec,
    ScheduleSpec, SimulationConfig, FULL_SCALE_AGENTS, FULL_SCALE_RUNS,
};
pub use output::{
    fmt_float, read_column, read_diagnostics, read_finals, summary, write_ensemble,
    write_sweep_csv, DivergedRun, Summary, SummaryBound, DIAGNOSTICS_COLUMNS, SCHEMA_VERSION,
    SWEEP_COLUMNS,
};
pub use run::{
    run_ensemble, run_ensemble_with_threads, run_simulation, run_sweep, substitute, Ensemble,
    EnsembleSummary, Experiment, Outcome, PostBurnIn, RunRecord, SweepAxis,
};

use crate::analysis::AnalysisError;
use crate::dynamics::DynamicsError;
use crate::objectives::ObjectiveError;
use crate::stochastic::NoiseError;
use thiserror::Error;

/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for I/O errors.
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Io(_) | Self::Csv(_) | Self::Json(_) => EXIT_IO,
        }
    }
}

impl From<ObjectiveError> for HarnessError {
    fn from(e: ObjectiveError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<NoiseError> for HarnessError {
    fn from(e: NoiseError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DynamicsError> for HarnessError {
    fn from(e: DynamicsError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<AnalysisError> for HarnessError {
    fn from(e: AnalysisError) -> Self {
        Self::Config(e.to_string())
    }
}

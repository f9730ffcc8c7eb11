//! Experiment harness over the analytic fields.

pub mod config;
pub mod fit;
pub mod report;
pub mod studies;

use thiserror::Error;

use crate::field::FieldError;
use crate::schedule::ScheduleError;
use crate::stepper::StepError;

pub use config::{parse_solver, parse_solver_list, FieldFamily, FieldSpec, StudyConfig};
pub use fit::{fit_slope, Slope};
pub use report::{ExperimentReport, Row, CSV_HEADER};
pub use studies::{
    convergence_study, edit_experiment, latent_stats, reconstruction_experiment, roundtrip_study, stiffness_demo,
};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("slope fit needs at least 4 usable points, got {0}")]
    TooFewPoints(usize),
    #[error("oracle not self-consistent: halving its step changed the result by {0:e}")]
    Oracle(f64),
    #[error("every row of the {0} study diverged")]
    AllDiverged(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Run configuration files (TOML). Unknown keys are rejected; command-line
//! flags override file values, which override defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::lab::{parse_solver_list, FieldSpec, LabError, StudyConfig};
use crate::schedule::{NoiseSchedule, ScheduleError, ScheduleKind, Variable};
use crate::stepper::formulation::OdeFormulation;

pub const OUT_ENV: &str = "REVODE_OUT";
pub const DEFAULT_OUT: &str = "revode-out";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Lab(#[from] LabError),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub study: StudySection,
    pub field: Option<FieldSpec>,
    #[serde(default)]
    pub stability: StabilitySection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    /// `linear` or `cosine`.
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub offset: f64,
    pub horizon: f64,
    pub t_min: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: "linear".into(), beta_min: 0.1, beta_max: 20.0, offset: 0.008, horizon: 1.0, t_min: None }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ConfigError> {
        let kind = match self.kind.as_str() {
            "linear" => ScheduleKind::LinearBeta { beta_min: self.beta_min, beta_max: self.beta_max },
            "cosine" => ScheduleKind::Cosine { offset: self.offset },
            other => return Err(ConfigError::Invalid(format!("unknown schedule kind `{other}`"))),
        };
        Ok(NoiseSchedule::new(kind, self.horizon, self.t_min)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub solvers: Option<Vec<String>>,
    pub steps: Option<Vec<usize>>,
    pub budget: Option<Vec<usize>>,
    pub formulation: Option<String>,
    pub variable: Option<String>,
    pub strength: Option<f64>,
    pub guidance: Option<Vec<f64>>,
    pub roughness: Option<Vec<f64>>,
    pub separations: Option<Vec<f64>>,
    pub edit_guidance: Option<f64>,
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    pub method: Option<String>,
    pub window: Option<[f64; 4]>,
    pub res: Option<[usize; 2]>,
    pub probe: Option<String>,
    pub iters: Option<usize>,
    pub cap: Option<f64>,
    pub x: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse { path: path.to_path_buf(), message })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Flag, then file, then `REVODE_OUT`, then the built-in default.
    pub fn out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Study config from the file with `overrides` (from flags) applied on top.
    pub fn study(&self, overrides: &StudySection, field: Option<FieldSpec>, defaults: StudyConfig) -> Result<StudyConfig, ConfigError> {
        let s = &self.study;
        let mut c = defaults;
        if let Some(names) = pick(&overrides.solvers, &s.solvers) {
            c.solvers = parse_solver_list(&names)?;
        }
        if c.solvers.is_empty() {
            return Err(ConfigError::Invalid("no solvers given (use --solvers NAME,... or `all`)".into()));
        }
        if let Some(v) = pick(&overrides.steps, &s.steps) {
            c.steps = v;
            c.budgets.clear();
        }
        // A step list given on the command line beats a budget from the file.
        let budget = if overrides.steps.is_some() { overrides.budget.clone() } else { pick(&overrides.budget, &s.budget) };
        if let Some(v) = budget {
            c.budgets = v;
        }
        if let Some(f) = pick(&overrides.formulation, &s.formulation) {
            let form = OdeFormulation::parse(&f).ok_or_else(|| ConfigError::Invalid(format!("unknown formulation `{f}`")))?;
            form.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            c.formulation = Some(form);
        }
        if let Some(v) = pick(&overrides.variable, &s.variable) {
            c.variable = Some(Variable::parse(&v).ok_or_else(|| ConfigError::Invalid(format!("unknown grid variable `{v}`")))?);
        }
        if let Some(v) = pick(&overrides.strength, &s.strength) {
            c.strength = v;
        }
        if let Some(v) = pick(&overrides.guidance, &s.guidance) {
            c.guidance = v;
        }
        if let Some(v) = pick(&overrides.roughness, &s.roughness) {
            c.roughness = v;
        }
        if let Some(v) = pick(&overrides.separations, &s.separations) {
            c.separations = v;
        }
        if let Some(v) = pick(&overrides.edit_guidance, &s.edit_guidance) {
            c.edit_guidance = v;
        }
        if let Some(v) = pick(&overrides.replicates, &s.replicates) {
            c.replicates = v;
        }
        if let Some(f) = field.or_else(|| self.field.clone()) {
            c.field = f;
        }
        c.schedule = self.schedule.build()?;
        c.validate()?;
        Ok(c)
    }
}

fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

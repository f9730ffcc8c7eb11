//! Study configuration: which solvers, which analytic field, which ladders.

use serde::{Deserialize, Serialize};

use super::LabError;
use crate::field::{Component, Condition, FieldKind, FieldModel, NULL_CONDITION};
use crate::schedule::{NoiseSchedule, Variable};
use crate::stepper::formulation::OdeFormulation;
use crate::stepper::{RkMethod, SolverKind};
use crate::tableau::Branch;

pub const SOURCE: &str = "src";
pub const TARGET: &str = "trg";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldFamily {
    Gaussian,
    Mixture,
    Rough,
}

impl FieldFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(FieldFamily::Gaussian),
            "mixture" => Some(FieldFamily::Mixture),
            "rough" => Some(FieldFamily::Rough),
            _ => None,
        }
    }
}

/// Analytic field with a source, a target and a null condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    pub family: FieldFamily,
    pub dim: usize,
    /// Data spread of every condition.
    pub spread: f64,
    /// Magnitude of each source-mean coordinate.
    pub mean_scale: f64,
    pub amplitude: f64,
    pub frequency: f64,
    /// Multiplies the oscillation; 0 is the smooth baseline.
    pub roughness: f64,
    /// `‖μ_trg − μ_src‖ / ‖μ_src‖`.
    pub separation: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec {
            family: FieldFamily::Gaussian,
            dim: 8,
            spread: 0.5,
            mean_scale: 1.0,
            amplitude: 0.03,
            frequency: 4.0,
            roughness: 1.0,
            separation: 1.0,
        }
    }
}

impl FieldSpec {
    pub fn rough() -> Self {
        FieldSpec { family: FieldFamily::Rough, ..Default::default() }
    }

    /// Source mean: alternating `±mean_scale`.
    pub fn source_mean(&self) -> Vec<f64> {
        (0..self.dim).map(|j| if j % 2 == 0 { self.mean_scale } else { -self.mean_scale }).collect()
    }

    /// Target mean: the source mean shifted along `(1, …, 1)/√d`.
    pub fn target_mean(&self) -> Vec<f64> {
        let mu = self.source_mean();
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shift = self.separation * norm / (self.dim as f64).sqrt();
        mu.iter().map(|v| v + shift).collect()
    }

    pub fn build(&self) -> Result<FieldModel, LabError> {
        if self.dim == 0 || !(self.spread > 0.0) {
            return Err(LabError::Config("field needs dim >= 1 and spread > 0".into()));
        }
        let zero = vec![0.0; self.dim];
        let cond = |id: &str, mean: Vec<f64>, phase: f64| match self.family {
            FieldFamily::Mixture => {
                let neg: Vec<f64> = mean.iter().map(|v| -0.5 * v).collect();
                Condition::mixture(
                    id,
                    vec![
                        Component { weight: 0.7, mean, spread: self.spread },
                        Component { weight: 0.3, mean: neg, spread: self.spread },
                    ],
                )
                .with_phase(phase)
            }
            _ => Condition::gaussian(id, mean, self.spread).with_phase(phase),
        };
        let conditions = vec![
            cond(SOURCE, self.source_mean(), 0.0),
            cond(TARGET, self.target_mean(), 1.3),
            Condition::gaussian(NULL_CONDITION, zero, self.spread).with_phase(2.1),
        ];
        let kind = match self.family {
            FieldFamily::Gaussian => FieldKind::Gaussian,
            FieldFamily::Mixture => FieldKind::GaussianMixture,
            FieldFamily::Rough => FieldKind::RoughSynthetic {
                amplitude: self.amplitude,
                frequency: self.frequency,
                roughness: self.roughness,
            },
        };
        Ok(FieldModel::new(kind, self.dim, conditions)?)
    }
}

/// Parses `name` or `name:key=value,key=value` (keys `p`, `gamma`, `zeta`, `x`, `branch`).
pub fn parse_solver(spec: &str) -> Result<SolverKind, LabError> {
    let (name, params) = match spec.split_once(':') {
        Some((n, p)) => (n.trim(), p),
        None => (spec.trim(), ""),
    };
    let mut kind = SolverKind::from_name(name)?;
    for kv in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| LabError::Config(format!("expected key=value in `{kv}`")))?;
        let num = || v.trim().parse::<f64>().map_err(|_| LabError::Config(format!("`{v}` is not a number")));
        match (&mut kind, k.trim()) {
            (SolverKind::Edict { p }, "p") => *p = num()?,
            (SolverKind::Bdia { gamma }, "gamma") => *gamma = num()?,
            (SolverKind::Rex { zeta, .. } | SolverKind::McCallumFoster { zeta, .. }, "zeta") => *zeta = num()?,
            (SolverKind::Rk(RkMethod::Ees25 { x } | RkMethod::Ees27 { x, .. }), "x") => *x = num()?,
            (SolverKind::Rk(RkMethod::Ees27 { branch, .. }), "branch") => {
                *branch = match v.trim() {
                    "+" | "plus" => Branch::Plus,
                    "-" | "minus" => Branch::Minus,
                    o => return Err(LabError::Config(format!("unknown branch `{o}`"))),
                }
            }
            (_, key) => return Err(LabError::Config(format!("solver `{name}` has no parameter `{key}`"))),
        }
    }
    kind.validate()?;
    Ok(kind)
}

/// `"all"` expands to the comparison set. A bare `key=value` item continues
/// the previous solver's parameters, so comma-split lists such as
/// `ees27:x=0.1,branch=minus,ddim` come out right.
pub fn parse_solver_list(specs: &[String]) -> Result<Vec<SolverKind>, LabError> {
    let mut joined: Vec<String> = Vec::new();
    for s in specs {
        let continues = s.contains('=') && !s.contains(':');
        match joined.last_mut() {
            Some(prev) if continues && prev.contains(':') => {
                prev.push(',');
                prev.push_str(s);
            }
            _ => joined.push(s.clone()),
        }
    }
    let mut out = Vec::new();
    for s in &joined {
        if s == "all" {
            for n in SolverKind::STUDY_SET {
                out.push(SolverKind::from_name(n)?);
            }
        } else {
            out.push(parse_solver(s)?);
        }
    }
    if out.is_empty() {
        return Err(LabError::Config("solver list is empty".into()));
    }
    Ok(out)
}

/// Everything a study needs; built by the CLI from file and flags.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub solvers: Vec<SolverKind>,
    /// Applied to solvers that accept a formulation choice.
    pub formulation: Option<OdeFormulation>,
    /// Grid variable; `None` uses each solver's default.
    pub variable: Option<Variable>,
    pub steps: Vec<usize>,
    /// NFE budgets; when non-empty they replace `steps` per solver.
    pub budgets: Vec<usize>,
    pub schedule: NoiseSchedule,
    pub field: FieldSpec,
    pub guidance: Vec<f64>,
    /// Reconstruction roughness sweep (`ρ`).
    pub roughness: Vec<f64>,
    pub separations: Vec<f64>,
    pub edit_guidance: f64,
    pub strength: f64,
    pub seed: u64,
    pub replicates: usize,
    pub jobs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            solvers: Vec::new(),
            formulation: None,
            variable: None,
            steps: vec![8, 16, 32, 64, 128],
            budgets: Vec::new(),
            schedule: NoiseSchedule::standard(),
            field: FieldSpec::default(),
            guidance: vec![1.0, 3.0, 7.0],
            roughness: vec![1.0, 0.0],
            separations: vec![0.0, 1.0, 4.0, 16.0],
            edit_guidance: 3.0,
            strength: 1.0,
            seed: 0,
            replicates: 1,
            jobs: 1,
        }
    }
}

impl StudyConfig {
    pub fn with_solvers(names: &[&str]) -> Result<Self, LabError> {
        let specs: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        Ok(StudyConfig { solvers: parse_solver_list(&specs)?, ..Default::default() })
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.solvers.is_empty() {
            return Err(LabError::Config("solver list is empty".into()));
        }
        if self.steps.is_empty() && self.budgets.is_empty() {
            return Err(LabError::Config("need at least one step count or budget".into()));
        }
        if self.steps.contains(&0) {
            return Err(LabError::Config("step counts must be positive".into()));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(LabError::Config(format!("strength {} must lie in (0, 1]", self.strength)));
        }
        if self.replicates == 0 {
            return Err(LabError::Config("need at least one replicate".into()));
        }
        for k in &self.solvers {
            k.validate()?;
            for &b in &self.budgets {
                k.steps_for_budget(b)?;
            }
        }
        Ok(())
    }

    /// Step counts for `kind`, in ladder order.
    pub fn ladder(&self, kind: &SolverKind) -> Result<Vec<usize>, LabError> {
        if self.budgets.is_empty() {
            Ok(self.steps.clone())
        } else {
            self.budgets.iter().map(|&b| Ok(kind.steps_for_budget(b)?)).collect()
        }
    }

    pub fn formulation_for(&self, kind: &SolverKind) -> OdeFormulation {
        match self.formulation {
            Some(f) if kind.accepts_formulation() => f,
            _ => kind.default_formulation(),
        }
    }

    pub fn variable_for(&self, kind: &SolverKind) -> Variable {
        self.variable.unwrap_or_else(|| kind.default_grid_variable())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.replicates as u64).map(|k| self.seed.wrapping_add(k))
    }
}

//! Solver sessions: every solver family stepping over a grid in either
//! direction, with evaluation accounting and divergence detection.

pub mod formulation;
pub mod kernels;
mod trajectory;

use std::fmt;

use thiserror::Error;

pub use formulation::{Ode, OdeFormulation, Parametrisation, Treatment};
pub use trajectory::{Marker, Trajectory, TrajectoryPoint};

use crate::field::{FieldError, NoisePredictor};
use crate::schedule::{Direction, NoiseLevel, NoiseSchedule, ScheduleError, TimeGrid, Variable};
use crate::tableau::{self, Branch, ButcherTableau, TableauError};
use kernels::{CoupledState, DdimCoeffs, HeunState, RexStep};

/// States with `‖x‖∞` above this count as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

fn at(step: &Option<usize>) -> String {
    step.map(|s| format!(" at step {s}")).unwrap_or_default()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("field evaluation failed{}: {source}", at(.step))]
    Field { step: Option<usize>, source: FieldError },
    #[error("non-finite value{}{}", at(.step), .stage.map(|s| format!(" (stage {s})")).unwrap_or_default())]
    NonFinite { step: Option<usize>, stage: Option<usize> },
    #[error("diverged at step {step}: max |x| = {norm:e}")]
    Diverged { step: usize, norm: f64 },
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tableau(#[from] TableauError),
    #[error("cannot step {direction:?} from grid position {position}")]
    EndOfGrid { position: usize, direction: Direction },
    #[error("budget of {budget} evaluations is not a multiple of {cost} per step")]
    Budget { budget: usize, cost: usize },
}

impl From<FieldError> for StepError {
    fn from(source: FieldError) -> Self {
        StepError::Field { step: None, source }
    }
}

impl StepError {
    /// Attach a step index to errors raised inside a kernel.
    pub fn at_step(self, index: usize) -> Self {
        match self {
            StepError::Field { step: None, source } => StepError::Field { step: Some(index), source },
            StepError::NonFinite { step: None, stage } => StepError::NonFinite { step: Some(index), stage },
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, StepError::NonFinite { .. } | StepError::Diverged { .. })
    }
}

/// Base solver of the McCallum–Foster and Rex constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseMethod {
    Euler,
    Midpoint,
}

impl BaseMethod {
    pub fn tableau(self) -> ButcherTableau {
        match self {
            BaseMethod::Euler => tableau::euler(),
            BaseMethod::Midpoint => tableau::midpoint(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseMethod::Euler => "euler",
            BaseMethod::Midpoint => "midpoint",
        }
    }
}

/// Explicit Runge–Kutta methods usable as stand-alone solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RkMethod {
    Ees25 { x: f64 },
    Ees27 { x: f64, branch: Branch },
    Euler,
    Midpoint,
    Heun2,
    Rk3,
    Rk4,
}

impl RkMethod {
    pub fn tableau(self) -> Result<ButcherTableau, TableauError> {
        match self {
            RkMethod::Ees25 { x } => tableau::ees25_tableau(x),
            RkMethod::Ees27 { x, branch } => tableau::ees27_tableau(x, branch),
            RkMethod::Euler => Ok(tableau::euler()),
            RkMethod::Midpoint => Ok(tableau::midpoint()),
            RkMethod::Heun2 => Ok(tableau::heun2()),
            RkMethod::Rk3 => Ok(tableau::kutta_rk3()),
            RkMethod::Rk4 => Ok(tableau::rk4()),
        }
    }

    pub fn stages(self) -> usize {
        match self {
            RkMethod::Euler => 1,
            RkMethod::Midpoint | RkMethod::Heun2 => 2,
            RkMethod::Ees25 { .. } | RkMethod::Rk3 => 3,
            RkMethod::Ees27 { .. } | RkMethod::Rk4 => 4,
        }
    }
}

pub const DEFAULT_EDICT_P: f64 = 0.93;
pub const DEFAULT_BDIA_GAMMA: f64 = 0.96;
pub const DEFAULT_ZETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    Ddim,
    Edict { p: f64 },
    Bdia { gamma: f64 },
    Obelm,
    Rex { base: BaseMethod, zeta: f64 },
    ReversibleHeun,
    McCallumFoster { base: BaseMethod, zeta: f64 },
    Rk(RkMethod),
}

impl SolverKind {
    pub fn ees25() -> Self {
        SolverKind::Rk(RkMethod::Ees25 { x: tableau::EES25_DEFAULT_X })
    }

    pub fn ees27() -> Self {
        SolverKind::Rk(RkMethod::Ees27 {
            x: tableau::ees27_default_x(),
            branch: Branch::Plus,
        })
    }

    /// Names accepted on the command line and in configs.
    pub const NAMES: [&'static str; 16] = [
        "ddim", "edict", "bdia", "obelm", "rex-euler", "rex-midpoint", "rev-heun", "mcf-euler", "mcf-midpoint", "ees25",
        "ees27", "euler", "midpoint", "heun2", "rk3", "rk4",
    ];

    /// The solvers compared in the experiments.
    pub const STUDY_SET: [&'static str; 11] = [
        "ddim", "edict", "bdia", "obelm", "rex-euler", "rex-midpoint", "rev-heun", "mcf-euler", "mcf-midpoint", "ees25",
        "ees27",
    ];

    /// Solver with default parameters.
    pub fn from_name(name: &str) -> Result<Self, StepError> {
        let k = match name {
            "ddim" => SolverKind::Ddim,
            "edict" => SolverKind::Edict { p: DEFAULT_EDICT_P },
            "bdia" => SolverKind::Bdia { gamma: DEFAULT_BDIA_GAMMA },
            "obelm" | "o-belm" => SolverKind::Obelm,
            "rex-euler" => SolverKind::Rex { base: BaseMethod::Euler, zeta: DEFAULT_ZETA },
            "rex-midpoint" => SolverKind::Rex { base: BaseMethod::Midpoint, zeta: DEFAULT_ZETA },
            "rev-heun" | "reversible-heun" => SolverKind::ReversibleHeun,
            "mcf-euler" => SolverKind::McCallumFoster { base: BaseMethod::Euler, zeta: DEFAULT_ZETA },
            "mcf-midpoint" => SolverKind::McCallumFoster { base: BaseMethod::Midpoint, zeta: DEFAULT_ZETA },
            "ees25" => SolverKind::ees25(),
            "ees27" => SolverKind::ees27(),
            "euler" => SolverKind::Rk(RkMethod::Euler),
            "midpoint" => SolverKind::Rk(RkMethod::Midpoint),
            "heun2" => SolverKind::Rk(RkMethod::Heun2),
            "rk3" => SolverKind::Rk(RkMethod::Rk3),
            "rk4" => SolverKind::Rk(RkMethod::Rk4),
            other => return Err(StepError::InvalidParams(format!("unknown solver `{other}`"))),
        };
        Ok(k)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Edict { .. } => "edict",
            SolverKind::Bdia { .. } => "bdia",
            SolverKind::Obelm => "obelm",
            SolverKind::Rex { base: BaseMethod::Euler, .. } => "rex-euler",
            SolverKind::Rex { base: BaseMethod::Midpoint, .. } => "rex-midpoint",
            SolverKind::ReversibleHeun => "rev-heun",
            SolverKind::McCallumFoster { base: BaseMethod::Euler, .. } => "mcf-euler",
            SolverKind::McCallumFoster { base: BaseMethod::Midpoint, .. } => "mcf-midpoint",
            SolverKind::Rk(RkMethod::Ees25 { .. }) => "ees25",
            SolverKind::Rk(RkMethod::Ees27 { .. }) => "ees27",
            SolverKind::Rk(RkMethod::Euler) => "euler",
            SolverKind::Rk(RkMethod::Midpoint) => "midpoint",
            SolverKind::Rk(RkMethod::Heun2) => "heun2",
            SolverKind::Rk(RkMethod::Rk3) => "rk3",
            SolverKind::Rk(RkMethod::Rk4) => "rk4",
        }
    }

    /// Parameter string for reports, e.g. `p=0.93`.
    pub fn params(&self) -> String {
        match self {
            SolverKind::Edict { p } => format!("p={p}"),
            SolverKind::Bdia { gamma } => format!("gamma={gamma}"),
            SolverKind::Rex { zeta, .. } | SolverKind::McCallumFoster { zeta, .. } => format!("zeta={zeta}"),
            SolverKind::Rk(RkMethod::Ees25 { x }) => format!("x={x}"),
            SolverKind::Rk(RkMethod::Ees27 { x, branch }) => {
                format!("x={x};branch={}", if *branch == Branch::Plus { "+" } else { "-" })
            }
            _ => String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        let bad = |m: String| Err(StepError::InvalidParams(m));
        match *self {
            SolverKind::Edict { p } if !(p > 0.0 && p <= 1.0) => bad(format!("EDICT mixing p = {p} must lie in (0, 1]")),
            // γ = 0 makes the backward recursion singular.
            SolverKind::Bdia { gamma } if !(gamma > 0.0 && gamma <= 1.0) => {
                bad(format!("BDIA gamma = {gamma} must lie in (0, 1]"))
            }
            SolverKind::Rex { zeta, .. } | SolverKind::McCallumFoster { zeta, .. } if !(zeta > 0.0 && zeta <= 1.0) => {
                bad(format!("coupling zeta = {zeta} must lie in (0, 1]"))
            }
            SolverKind::Rk(m) => m.tableau().map(|_| ()).map_err(StepError::from),
            _ => Ok(()),
        }
    }

    /// Whether the backward step is the exact algebraic inverse of the forward step.
    pub fn is_algebraically_reversible(&self) -> bool {
        !matches!(self, SolverKind::Ddim | SolverKind::Rk(_))
    }

    pub fn is_two_step(&self) -> bool {
        matches!(self, SolverKind::Bdia { .. } | SolverKind::Obelm)
    }

    /// Nominal evaluations per step used for budget matching.
    pub fn budget_cost(&self) -> usize {
        match self {
            SolverKind::Ddim | SolverKind::Bdia { .. } | SolverKind::Obelm => 1,
            SolverKind::Edict { .. } | SolverKind::ReversibleHeun => 2,
            SolverKind::Rk(m) => m.stages(),
            SolverKind::Rex { base, .. } | SolverKind::McCallumFoster { base, .. } => 2 * base.tableau().stages(),
        }
    }

    /// Steps so that `steps × budget_cost = budget` exactly.
    pub fn steps_for_budget(&self, budget: usize) -> Result<usize, StepError> {
        let cost = self.budget_cost();
        if budget == 0 || budget % cost != 0 {
            return Err(StepError::Budget { budget, cost });
        }
        Ok(budget / cost)
    }

    pub fn default_formulation(&self) -> OdeFormulation {
        match self {
            SolverKind::Rk(_) => OdeFormulation::LAMBDA_X0_SEMILINEAR,
            SolverKind::ReversibleHeun | SolverKind::McCallumFoster { .. } => OdeFormulation::T_ORIGINAL,
            _ => OdeFormulation::RATIO_DDIM,
        }
    }

    /// Whether the formulation can be chosen (the DDIM family is tied to `x/α` over `σ/α`).
    pub fn accepts_formulation(&self) -> bool {
        matches!(self, SolverKind::Rk(_) | SolverKind::ReversibleHeun | SolverKind::McCallumFoster { .. })
    }

    pub fn default_grid_variable(&self) -> Variable {
        match self {
            SolverKind::Rk(_) => Variable::Lambda,
            _ => Variable::T,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.params();
        if p.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}({})", self.name(), p)
        }
    }
}

/// Solver-specific state carried alongside the primary state.
#[derive(Debug, Clone, PartialEq)]
pub enum Auxiliary {
    None,
    Edict { y: Vec<f64> },
    /// `k` is filled by the first step.
    Heun { xhat: Vec<f64>, k: Option<Vec<f64>> },
    Coupled { xhat: Vec<f64> },
    /// Neighbouring grid state of a two-step method.
    Window { other: Option<(usize, Vec<f64>)> },
}

/// A solver kind with its full stepping state on one grid.
///
/// Positions are canonical grid indices: 0 is the data end, N the noise end.
/// Sampling moves towards 0, inversion towards N.
#[derive(Debug, Clone)]
pub struct SolverSession {
    kind: SolverKind,
    rk: Option<ButcherTableau>,
    formulation: OdeFormulation,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    levels: Vec<NoiseLevel>,
    position: usize,
    /// Primary state, in ODE coordinates for formulation-based solvers.
    y: Vec<f64>,
    aux: Auxiliary,
    nfe: usize,
    budget_nfe: usize,
    steps: usize,
}

impl SolverSession {
    /// Starts at the end of the grid its direction begins from.
    pub fn new(
        kind: SolverKind,
        formulation: Option<OdeFormulation>,
        schedule: &NoiseSchedule,
        grid: &TimeGrid,
        x0: &[f64],
    ) -> Result<Self, StepError> {
        kind.validate()?;
        let formulation = match formulation {
            Some(f) if f != kind.default_formulation() && !kind.accepts_formulation() => {
                return Err(StepError::InvalidParams(format!(
                    "{} is defined in {} only",
                    kind.name(),
                    kind.default_formulation()
                )))
            }
            Some(f) => f,
            None => kind.default_formulation(),
        };
        formulation.validate()?;
        if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
            return Err(StepError::InvalidParams("initial state must be non-empty and finite".into()));
        }
        let levels = grid.levels(schedule);
        if levels.iter().any(|l| !(l.alpha > 0.0 && l.sigma > 0.0)) {
            return Err(StepError::InvalidParams("grid reaches a level with alpha or sigma = 0".into()));
        }
        let rk = match kind {
            SolverKind::Rk(m) => Some(m.tableau()?),
            SolverKind::Rex { base, .. } | SolverKind::McCallumFoster { base, .. } => Some(base.tableau()),
            _ => None,
        };
        let position = match grid.direction() {
            Direction::Sampling => grid.steps(),
            Direction::Inversion => 0,
        };
        let mut s = SolverSession {
            kind,
            rk,
            formulation,
            schedule: schedule.clone(),
            grid: grid.clone(),
            levels,
            position,
            y: Vec::new(),
            aux: Auxiliary::None,
            nfe: 0,
            budget_nfe: 0,
            steps: 0,
        };
        s.reset(x0, position)?;
        Ok(s)
    }

    /// Re-initialise at `position` with a fresh state; counters are kept.
    pub fn reset(&mut self, x0: &[f64], position: usize) -> Result<(), StepError> {
        if position > self.grid.steps() {
            return Err(StepError::InvalidParams(format!("position {position} outside the grid")));
        }
        self.position = position;
        let scale = self.scale_at(position);
        self.y = x0.iter().map(|v| v / scale).collect();
        self.aux = match self.kind {
            SolverKind::Edict { .. } => Auxiliary::Edict { y: x0.to_vec() },
            SolverKind::ReversibleHeun => Auxiliary::Heun { xhat: self.y.clone(), k: None },
            SolverKind::McCallumFoster { .. } | SolverKind::Rex { .. } => Auxiliary::Coupled { xhat: self.y.clone() },
            SolverKind::Bdia { .. } | SolverKind::Obelm => Auxiliary::Window { other: None },
            _ => Auxiliary::None,
        };
        Ok(())
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    pub fn formulation(&self) -> OdeFormulation {
        self.formulation
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn level(&self) -> NoiseLevel {
        self.levels[self.position]
    }

    /// Actual predictor evaluations so far.
    pub fn nfe(&self) -> usize {
        self.nfe
    }

    /// Nominal evaluations (steps × budget cost) so far.
    pub fn budget_nfe(&self) -> usize {
        self.budget_nfe
    }

    pub fn auxiliary(&self) -> &Auxiliary {
        &self.aux
    }

    fn ode_coordinates(&self) -> bool {
        matches!(
            self.kind,
            SolverKind::Rk(_) | SolverKind::ReversibleHeun | SolverKind::McCallumFoster { .. }
        )
    }

    fn scale_at(&self, position: usize) -> f64 {
        if self.ode_coordinates() {
            self.formulation.state_scale(&self.levels[position])
        } else {
            1.0
        }
    }

    /// Primary state in the original `x` coordinates.
    pub fn state(&self) -> Vec<f64> {
        let s = self.scale_at(self.position);
        self.y.iter().map(|v| v * s).collect()
    }

    /// Auxiliary vector (`y`, `x̂`, or window neighbour) in `x` coordinates.
    pub fn auxiliary_state(&self) -> Option<Vec<f64>> {
        let s = self.scale_at(self.position);
        match &self.aux {
            Auxiliary::Edict { y } => Some(y.clone()),
            Auxiliary::Heun { xhat, .. } | Auxiliary::Coupled { xhat } => Some(xhat.iter().map(|v| v * s).collect()),
            Auxiliary::Window { other: Some((_, x)) } => Some(x.clone()),
            _ => None,
        }
    }

    pub fn can_step(&self, direction: Direction) -> bool {
        match direction {
            Direction::Sampling => self.position > 0,
            Direction::Inversion => self.position < self.grid.steps(),
        }
    }

    fn ode_value(&self, position: usize) -> f64 {
        self.levels[position].value(self.formulation.variable())
    }

    fn ddim(&self, from: usize, to: usize) -> DdimCoeffs {
        let (li, lj) = (&self.levels[from], &self.levels[to]);
        let a = lj.alpha / li.alpha;
        DdimCoeffs { a, b: lj.sigma - a * li.sigma }
    }

    /// One step in `direction`. `step_index` is attached to any error.
    pub fn step(&mut self, field: &dyn NoisePredictor, direction: Direction) -> Result<Marker, StepError> {
        let index = self.steps;
        let r = self.step_inner(field, direction).map_err(|e| e.at_step(index));
        if r.is_ok() {
            self.steps += 1;
            self.budget_nfe += self.kind.budget_cost();
            self.check_divergence(index)?;
        }
        r
    }

    fn check_divergence(&self, index: usize) -> Result<(), StepError> {
        let x = self.state();
        let mut norm = 0.0f64;
        for v in &x {
            if !v.is_finite() {
                return Err(StepError::NonFinite { step: Some(index), stage: None });
            }
            norm = norm.max(v.abs());
        }
        if let Some(a) = self.auxiliary_state() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(StepError::NonFinite { step: Some(index), stage: None });
            }
        }
        if norm > DIVERGENCE_THRESHOLD {
            return Err(StepError::Diverged { step: index, norm });
        }
        Ok(())
    }

    fn step_inner(&mut self, field: &dyn NoisePredictor, direction: Direction) -> Result<Marker, StepError> {
        if !self.can_step(direction) {
            return Err(StepError::EndOfGrid { position: self.position, direction });
        }
        if field.dim() != self.y.len() {
            return Err(FieldError::DimensionMismatch { expected: self.y.len(), got: field.dim() }.into());
        }
        let i = self.position;
        let j = match direction {
            Direction::Sampling => i - 1,
            Direction::Inversion => i + 1,
        };
        let forward = direction == Direction::Sampling;
        let level_i = self.levels[i];
        let mut nfe = 0usize;
        let mut eps_at = |lv: &NoiseLevel, x: &[f64], out: &mut [f64]| -> Result<(), StepError> {
            field.predict(x, lv, out)?;
            nfe += 1;
            Ok(())
        };
        let mut marker = Marker::Step;
        match self.kind {
            SolverKind::Ddim => {
                let c = self.ddim(i, j);
                let mut e = vec![0.0; self.y.len()];
                eps_at(&level_i, &self.y, &mut e)?;
                self.y = (0..e.len()).map(|k| c.a * self.y[k] + c.b * e[k]).collect();
            }
            SolverKind::Edict { p } => {
                let Auxiliary::Edict { y } = &self.aux else { unreachable!() };
                // Sampling i → i−1 uses level i; inversion undoes the step j → i taken at level j.
                let (c, lv) = if forward { (self.ddim(i, j), level_i) } else { (self.ddim(j, i), self.levels[j]) };
                let mut e = |x: &[f64], out: &mut [f64]| eps_at(&lv, x, out);
                let (nx, ny) = if forward {
                    kernels::edict_forward(c, p, &mut e, &self.y, y)?
                } else {
                    kernels::edict_backward(c, p, &mut e, &self.y, y)?
                };
                self.y = nx;
                self.aux = Auxiliary::Edict { y: ny };
            }
            SolverKind::Bdia { .. } | SolverKind::Obelm => {
                let Auxiliary::Window { other } = &self.aux else { unreachable!() };
                match other.clone() {
                    Some((o, xo)) if o == j => {
                        // Direction reversal: the neighbour is already known.
                        self.aux = Auxiliary::Window { other: Some((i, std::mem::replace(&mut self.y, xo))) };
                        marker = Marker::Shift;
                    }
                    Some((o, x_far)) => {
                        debug_assert_eq!(o, 2 * i - j);
                        let mut e = vec![0.0; self.y.len()];
                        eps_at(&level_i, &self.y, &mut e)?;
                        let next = self.two_step(o, i, j, &x_far, &e, forward);
                        self.aux = Auxiliary::Window { other: Some((i, std::mem::replace(&mut self.y, next))) };
                    }
                    None => {
                        let c = self.ddim(i, j);
                        let mut e = vec![0.0; self.y.len()];
                        eps_at(&level_i, &self.y, &mut e)?;
                        let next = (0..e.len()).map(|k| c.a * self.y[k] + c.b * e[k]).collect();
                        self.aux = Auxiliary::Window { other: Some((i, std::mem::replace(&mut self.y, next))) };
                        marker = Marker::Bootstrap;
                    }
                }
            }
            SolverKind::Rex { zeta, .. } => {
                let Auxiliary::Coupled { xhat } = &self.aux else { unreachable!() };
                let tab = self.rk.as_ref().expect("base tableau");
                let (from, to) = if forward { (i, j) } else { (j, i) };
                let st = RexStep {
                    alpha_from: self.levels[from].alpha,
                    alpha_to: self.levels[to].alpha,
                    tau_from: self.levels[from].ratio,
                    tau_to: self.levels[to].ratio,
                };
                let schedule = &self.schedule;
                let mut scratch = vec![0.0; self.y.len()];
                let mut f = |tau: f64, xb: &[f64], out: &mut [f64]| -> Result<(), StepError> {
                    let lv = schedule.level_at_ratio(tau);
                    for (s, v) in scratch.iter_mut().zip(xb) {
                        *s = lv.alpha * v;
                    }
                    eps_at(&lv, &scratch, out)
                };
                let s = CoupledState { x: self.y.clone(), xhat: xhat.clone() };
                let n = if forward {
                    kernels::rex_forward(tab, &mut f, zeta, st, &s)?
                } else {
                    kernels::rex_backward(tab, &mut f, zeta, st, &s)?
                };
                self.y = n.x;
                self.aux = Auxiliary::Coupled { xhat: n.xhat };
            }
            SolverKind::ReversibleHeun | SolverKind::McCallumFoster { .. } | SolverKind::Rk(_) => {
                let mut ode = Ode::new(&self.schedule, self.formulation, field);
                let (vi, vj) = (self.ode_value(i), self.ode_value(j));
                let mut f = |v: f64, y: &[f64], out: &mut [f64]| ode.rhs(v, y, out);
                match (self.kind, &self.aux) {
                    (SolverKind::Rk(_), _) => {
                        let tab = self.rk.as_ref().expect("tableau");
                        self.y = kernels::rk_step(tab, &mut f, vi, &self.y, vj - vi)?;
                    }
                    (SolverKind::ReversibleHeun, Auxiliary::Heun { xhat, k }) => {
                        let k = match k {
                            Some(k) => k.clone(),
                            None => {
                                let mut k0 = vec![0.0; self.y.len()];
                                f(vi, &self.y, &mut k0)?;
                                k0
                            }
                        };
                        let s = HeunState { x: self.y.clone(), xhat: xhat.clone(), k };
                        // The sampling step j ← i has h = v_j − v_i; inversion undoes the step i ← j.
                        let n = if forward {
                            kernels::rev_heun_forward(&mut f, vj, vj - vi, &s)?
                        } else {
                            kernels::rev_heun_backward(&mut f, vj, vi - vj, &s)?
                        };
                        self.y = n.x;
                        self.aux = Auxiliary::Heun { xhat: n.xhat, k: Some(n.k) };
                    }
                    (SolverKind::McCallumFoster { zeta, .. }, Auxiliary::Coupled { xhat }) => {
                        let tab = self.rk.as_ref().expect("base tableau");
                        let s = CoupledState { x: self.y.clone(), xhat: xhat.clone() };
                        let n = if forward {
                            kernels::mcf_forward(tab, &mut f, zeta, vi, vj - vi, &s)?
                        } else {
                            kernels::mcf_backward(tab, &mut f, zeta, vj, vi - vj, &s)?
                        };
                        self.y = n.x;
                        self.aux = Auxiliary::Coupled { xhat: n.xhat };
                    }
                    _ => unreachable!("auxiliary state matches kind"),
                }
                nfe += ode.evaluations;
            }
        }
        self.nfe += nfe;
        self.position = j;
        Ok(marker)
    }

    /// Two-step update from `(x_far at far, x_mid at mid)` to position `next`.
    fn two_step(&self, far: usize, mid: usize, next: usize, x_far: &[f64], e: &[f64], forward: bool) -> Vec<f64> {
        let x_mid = &self.y;
        match self.kind {
            SolverKind::Bdia { gamma } => {
                // The defining relation links (i+1, i, i−1); sampling solves for i−1,
                // inversion for i+1 — in both cases the unknown is computed from the
                // same relation written around `mid`.
                let (up, down) = if forward { (far, next) } else { (next, far) };
                let (c_up, c_down) = (self.ddim(mid, up), self.ddim(mid, down));
                if forward {
                    kernels::bdia_advance(gamma, c_up, c_down, x_far, x_mid, e)
                } else {
                    kernels::bdia_retreat(gamma, c_up, c_down, x_far, x_mid, e)
                }
            }
            SolverKind::Obelm => {
                let (up, down) = if forward { (far, next) } else { (next, far) };
                let sb = |k: usize| self.levels[k].ratio;
                let (h_i, h_ip1) = (sb(mid) - sb(down), sb(up) - sb(mid));
                let a_mid = self.levels[mid].alpha;
                let bar = |x: &[f64], k: usize| -> Vec<f64> { x.iter().map(|v| v / self.levels[k].alpha).collect() };
                let xb_far = bar(x_far, far);
                let xb_mid: Vec<f64> = x_mid.iter().map(|v| v / a_mid).collect();
                let out = if forward {
                    kernels::obelm_advance(h_i, h_ip1, &xb_far, &xb_mid, e)
                } else {
                    kernels::obelm_retreat(h_i, h_ip1, &xb_far, &xb_mid, e)
                };
                let a_next = self.levels[next].alpha;
                out.into_iter().map(|v| v * a_next).collect()
            }
            _ => unreachable!("two-step kinds only"),
        }
    }

    /// Steps in `direction` until the end of the grid.
    pub fn integrate(&mut self, field: &dyn NoisePredictor, direction: Direction, record: bool) -> Trajectory {
        let (nfe0, budget0) = (self.nfe, self.budget_nfe);
        let mut traj = Trajectory::new(self, direction);
        traj.push(self, Marker::Start, record);
        while self.can_step(direction) {
            match self.step(field, direction) {
                Ok(m) => traj.push(self, m, record),
                Err(e) => {
                    // Keep the state that triggered the divergence.
                    if e.is_divergence() && !matches!(e, StepError::NonFinite { stage: Some(_), .. }) {
                        traj.push(self, Marker::Diverged, record);
                    }
                    traj.error = Some(e);
                    break;
                }
            }
        }
        traj.nfe = self.nfe - nfe0;
        traj.budget_nfe = self.budget_nfe - budget0;
        traj.terminal = self.state();
        traj
    }
}

/// Fresh session over `grid` integrated once in the grid's direction.
pub fn integrate(
    kind: SolverKind,
    formulation: Option<OdeFormulation>,
    schedule: &NoiseSchedule,
    grid: &TimeGrid,
    x0: &[f64],
    field: &dyn NoisePredictor,
    record: bool,
) -> Result<(SolverSession, Trajectory), StepError> {
    let mut s = SolverSession::new(kind, formulation, schedule, grid, x0)?;
    let t = s.integrate(field, grid.direction(), record);
    Ok((s, t))
}

#[cfg(test)]
mod tests;

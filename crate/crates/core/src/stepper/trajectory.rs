use std::io::{self, Write};

use serde::Serialize;

use super::{SolverSession, StepError};
use crate::schedule::Direction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Marker {
    Start,
    Step,
    /// First step of a two-step method, taken with DDIM.
    Bootstrap,
    /// Two-step window moved without evaluation after a direction change.
    Shift,
    Diverged,
}

impl Marker {
    fn as_str(self) -> &'static str {
        match self {
            Marker::Start => "start",
            Marker::Step => "step",
            Marker::Bootstrap => "bootstrap",
            Marker::Shift => "shift",
            Marker::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub position: usize,
    /// Node value in the grid variable.
    pub grid_value: f64,
    pub t: f64,
    pub state: Vec<f64>,
    pub marker: Marker,
}

/// Record of one integration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub solver: String,
    pub params: String,
    pub formulation: String,
    pub variable: String,
    pub steps: usize,
    pub direction: Direction,
    pub points: Vec<TrajectoryPoint>,
    pub terminal: Vec<f64>,
    /// Predictor evaluations actually made.
    pub nfe: usize,
    /// Steps × nominal cost per step.
    pub budget_nfe: usize,
    pub error: Option<StepError>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    solver: &'a str,
    params: &'a str,
    formulation: &'a str,
    variable: &'a str,
    steps: usize,
    direction: Direction,
    nfe: usize,
    budget_nfe: usize,
    error: Option<String>,
}

impl Trajectory {
    pub(super) fn new(s: &SolverSession, direction: Direction) -> Self {
        Trajectory {
            solver: s.kind().name().to_string(),
            params: s.kind().params(),
            formulation: s.formulation().to_string(),
            variable: s.grid().variable().to_string(),
            steps: s.grid().steps(),
            direction,
            points: Vec::new(),
            terminal: Vec::new(),
            nfe: 0,
            budget_nfe: 0,
            error: None,
        }
    }

    pub(super) fn push(&mut self, s: &SolverSession, marker: Marker, record: bool) {
        if !record && !matches!(marker, Marker::Start) {
            return;
        }
        let p = s.position();
        self.points.push(TrajectoryPoint {
            position: p,
            grid_value: s.grid().node(p),
            t: s.level().t,
            state: if record { s.state() } else { Vec::new() },
            marker,
        });
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn into_result(self) -> Result<Self, StepError> {
        match self.error.clone() {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.terminal.len();
        let mut header = String::from("step,position,grid_value,t,marker");
        for j in 0..d {
            header.push_str(&format!(",x_{j}"));
        }
        writeln!(w, "{header}")?;
        for (k, p) in self.points.iter().enumerate() {
            write!(w, "{k},{},{:e},{:e},{}", p.position, p.grid_value, p.t, p.marker.as_str())?;
            for v in &p.state {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn sidecar_json(&self) -> String {
        let s = Sidecar {
            solver: &self.solver,
            params: &self.params,
            formulation: &self.formulation,
            variable: &self.variable,
            steps: self.steps,
            direction: self.direction,
            nfe: self.nfe,
            budget_nfe: self.budget_nfe,
            error: self.error.as_ref().map(|e| e.to_string()),
        };
        serde_json::to_string_pretty(&s).expect("sidecar serialises")
    }
}

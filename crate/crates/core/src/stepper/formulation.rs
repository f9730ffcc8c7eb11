//! ODE formulations of the probability-flow ODE: an independent variable, a
//! state rescaling, and the right-hand side built from a noise predictor.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::StepError;
use crate::field::NoisePredictor;
use crate::schedule::{NoiseLevel, NoiseSchedule, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parametrisation {
    /// `dx/dt = (d log α/dt)(x − ε/σ)`.
    TOriginal,
    /// `dx/dλ = σ² x − σ ε`.
    LambdaEps,
    /// `dx/dλ = −α² x + α x_θ`.
    LambdaX0,
    /// `d(x/α)/du = ε` with `u = σ/α`.
    RatioDdim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Treatment {
    BlackBox,
    /// Linear part solved exactly by rescaling the state.
    Semilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OdeFormulation {
    pub parametrisation: Parametrisation,
    pub treatment: Treatment,
}

impl OdeFormulation {
    pub const T_ORIGINAL: OdeFormulation = OdeFormulation::new(Parametrisation::TOriginal, Treatment::BlackBox);
    pub const LAMBDA_X0_SEMILINEAR: OdeFormulation =
        OdeFormulation::new(Parametrisation::LambdaX0, Treatment::Semilinear);
    pub const RATIO_DDIM: OdeFormulation = OdeFormulation::new(Parametrisation::RatioDdim, Treatment::BlackBox);

    pub const fn new(parametrisation: Parametrisation, treatment: Treatment) -> Self {
        OdeFormulation {
            parametrisation,
            treatment,
        }
    }

    pub fn validate(&self) -> Result<(), StepError> {
        match (self.parametrisation, self.treatment) {
            (Parametrisation::TOriginal | Parametrisation::RatioDdim, Treatment::Semilinear) => Err(
                StepError::InvalidParams(format!("{self}: semilinear treatment needs a half-logSNR parametrisation")),
            ),
            _ => Ok(()),
        }
    }

    /// Independent variable of the ODE.
    pub fn variable(&self) -> Variable {
        match self.parametrisation {
            Parametrisation::TOriginal => Variable::T,
            Parametrisation::LambdaEps | Parametrisation::LambdaX0 => Variable::Lambda,
            Parametrisation::RatioDdim => Variable::Ratio,
        }
    }

    /// Factor `s` with ODE state `y = x / s`.
    pub fn state_scale(&self, level: &NoiseLevel) -> f64 {
        use Parametrisation::*;
        match (self.parametrisation, self.treatment) {
            (LambdaEps, Treatment::Semilinear) | (RatioDdim, _) => level.alpha,
            (LambdaX0, Treatment::Semilinear) => level.sigma,
            _ => 1.0,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use Parametrisation::*;
        let (p, t) = match s.rsplit_once(':') {
            Some((p, t)) => (p, Some(t)),
            None => (s, None),
        };
        let parametrisation = match p {
            "t-original" => TOriginal,
            "lambda-eps" => LambdaEps,
            "lambda-x0" => LambdaX0,
            "ratio-ddim" => RatioDdim,
            _ => return None,
        };
        let treatment = match t {
            None | Some("black-box") => Treatment::BlackBox,
            Some("semilinear") => Treatment::Semilinear,
            _ => return None,
        };
        Some(OdeFormulation::new(parametrisation, treatment))
    }
}

impl fmt::Display for OdeFormulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.parametrisation {
            Parametrisation::TOriginal => "t-original",
            Parametrisation::LambdaEps => "lambda-eps",
            Parametrisation::LambdaX0 => "lambda-x0",
            Parametrisation::RatioDdim => "ratio-ddim",
        };
        let t = match self.treatment {
            Treatment::BlackBox => "black-box",
            Treatment::Semilinear => "semilinear",
        };
        write!(f, "{p}:{t}")
    }
}

/// The probability-flow ODE in one formulation, counting predictor calls.
pub struct Ode<'a> {
    pub schedule: &'a NoiseSchedule,
    pub formulation: OdeFormulation,
    pub field: &'a dyn NoisePredictor,
    pub evaluations: usize,
    scratch: Vec<f64>,
    eps: Vec<f64>,
}

impl<'a> Ode<'a> {
    pub fn new(schedule: &'a NoiseSchedule, formulation: OdeFormulation, field: &'a dyn NoisePredictor) -> Self {
        let d = field.dim();
        Ode {
            schedule,
            formulation,
            field,
            evaluations: 0,
            scratch: vec![0.0; d],
            eps: vec![0.0; d],
        }
    }

    pub fn level(&self, v: f64) -> NoiseLevel {
        self.schedule.level(self.formulation.variable(), v)
    }

    pub fn to_state(&self, level: &NoiseLevel, x: &[f64]) -> Vec<f64> {
        let s = self.formulation.state_scale(level);
        x.iter().map(|v| v / s).collect()
    }

    pub fn from_state(&self, level: &NoiseLevel, y: &[f64]) -> Vec<f64> {
        let s = self.formulation.state_scale(level);
        y.iter().map(|v| v * s).collect()
    }

    /// `out ← dy/dv` at `(v, y)`.
    pub fn rhs(&mut self, v: f64, y: &[f64], out: &mut [f64]) -> Result<(), StepError> {
        use Parametrisation::*;
        let lv = self.level(v);
        let scale = self.formulation.state_scale(&lv);
        for (xi, yi) in self.scratch.iter_mut().zip(y) {
            *xi = yi * scale;
        }
        self.field.predict(&self.scratch, &lv, &mut self.eps).map_err(StepError::from)?;
        self.evaluations += 1;
        let (a, s) = (lv.alpha, lv.sigma);
        let x = &self.scratch;
        let e = &self.eps;
        match (self.formulation.parametrisation, self.formulation.treatment) {
            (TOriginal, _) => {
                let f = self.schedule.dlog_alpha_dt(lv.t);
                for j in 0..out.len() {
                    out[j] = f * (x[j] - e[j] / s);
                }
            }
            (LambdaEps, Treatment::BlackBox) => {
                for j in 0..out.len() {
                    out[j] = s * s * x[j] - s * e[j];
                }
            }
            (LambdaEps, Treatment::Semilinear) => {
                let r = lv.ratio;
                for j in 0..out.len() {
                    out[j] = -r * e[j];
                }
            }
            (LambdaX0, Treatment::BlackBox) => {
                // −α² x + α x₀ with α x₀ = x − σ ε.
                for j in 0..out.len() {
                    out[j] = -a * a * x[j] + (x[j] - s * e[j]);
                }
            }
            (LambdaX0, Treatment::Semilinear) => {
                let g = 1.0 / lv.ratio;
                for j in 0..out.len() {
                    out[j] = g * (x[j] - s * e[j]) / a;
                }
            }
            (RatioDdim, _) => out.copy_from_slice(e),
        }
        Ok(())
    }
}
